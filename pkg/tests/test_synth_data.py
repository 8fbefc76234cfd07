from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tapsed import config
from tapsed.data import load_dataset, load_split, strong_frame_labels, weak_vectors
from tapsed.evaluation import EventInterval
from tapsed.frontend import SAMPLE_RATE, read_wav
from tapsed.synth import (
    CLASSES, GRID, PEAK, STATIONARY, TRANSIENT, SynthConfig, clip_rng, energy_support, generate_clip, render_event,
    synthesize,
)

FRAME = 256


def test_class_split():
    assert len(TRANSIENT) == len(STATIONARY) == 5
    assert not set(TRANSIENT) & set(STATIONARY)


@pytest.mark.parametrize("label", CLASSES)
def test_render_event_peak_and_length(label):
    x = render_event(label, 8000, np.random.default_rng(0))
    assert len(x) == 8000
    assert np.abs(x).max() == pytest.approx(PEAK)


def test_unknown_class_rejected():
    with pytest.raises(KeyError):
        render_event("siren", 100, np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_single_event_energy_matches_annotation(seed):
    cfg = SynthConfig(min_events=1, max_events=1, snr_low=20.0, snr_high=20.0)
    x, events = generate_clip(np.random.default_rng(seed), cfg)
    (ev,) = events
    a, b = int(round(ev.onset * SAMPLE_RATE)), int(round(ev.offset * SAMPLE_RATE))
    power = np.mean(x[a:b] ** 2)
    # noise sits at 0.01 x event power; the quietest event frames stay above 0.08
    active = energy_support(x, FRAME, 0.04 * power)
    want = np.zeros_like(active)
    want[a // FRAME:(b + FRAME - 1) // FRAME] = True
    mismatch = np.flatnonzero(active != want)
    edges = np.array([a // FRAME, (b - 1) // FRAME])
    # only frames straddling an annotated boundary may disagree
    assert all(np.min(np.abs(edges - m)) <= 1 for m in mismatch)


def test_event_boundaries_on_grid_and_polyphony():
    cfg = SynthConfig(min_events=3, max_events=6, polyphony=2)
    for i in range(20):
        _, events = generate_clip(np.random.default_rng(i), cfg)
        t = np.arange(0, 10, 0.001)
        cover = sum(((t >= e.onset) & (t < e.offset)).astype(int) for e in events)
        assert cover.max(initial=0) <= 2
        for e in events:
            for v in (e.onset, e.offset):
                assert round(v * SAMPLE_RATE) % GRID == 0


def test_zero_event_clip_is_silent():
    x, events = generate_clip(np.random.default_rng(0), SynthConfig(min_events=0, max_events=0))
    assert events == [] and not x.any()


def test_synth_config_validation():
    for bad in (SynthConfig(min_events=3, max_events=1), SynthConfig(polyphony=0), SynthConfig(snr_low=30)):
        with pytest.raises(ValueError):
            bad.validate()


def small_synth():
    return SynthConfig(n_strong=3, n_weak=2, n_unlabeled=2, n_validation=2, clip_seconds=2.0)


def test_synthesize_is_deterministic(tmp_path):
    t1 = synthesize(small_synth(), tmp_path / "a", seed=3)
    t2 = synthesize(small_synth(), tmp_path / "b", seed=3)
    assert t1 == t2
    for split, clips in t1.items():
        for name in clips:
            assert (tmp_path / "a" / "audio" / split / name).read_bytes() == \
                (tmp_path / "b" / "audio" / split / name).read_bytes()
    x = read_wav(tmp_path / "a" / "audio" / "strong" / "strong_00000.wav")
    assert len(x) == 2 * SAMPLE_RATE
    assert synthesize(small_synth(), tmp_path / "c", seed=4) != t1


def test_split_streams_are_disjoint():
    a = clip_rng(0, "strong", 0).random(4)
    b = clip_rng(0, "weak", 0).random(4)
    assert not np.array_equal(a, b)


def test_load_dataset_shapes(tmp_path):
    truth = synthesize(small_synth(), tmp_path, seed=0)
    data = load_dataset(tmp_path, clip_seconds=2.0)
    frames = 2 * SAMPLE_RATE // FRAME + 1
    assert data.strong_x.shape == (3, 128, frames)
    assert data.strong_y.shape == (3, 10, frames)
    assert data.weak_y.shape == (2, 10)
    assert data.val_x.shape[0] == 2 and data.classes == CLASSES
    for name, row in zip(sorted(truth["weak"]), data.weak_y):
        assert set(np.asarray(CLASSES)[row > 0]) == {e.label for e in truth["weak"][name]}
    names, _ = load_split(tmp_path, "validation", 2.0)
    assert names == sorted(truth["validation"])


def test_missing_audio_and_unknown_split(tmp_path):
    synthesize(small_synth(), tmp_path, seed=0)
    (tmp_path / "audio" / "weak" / "weak_00001.wav").unlink()
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path, "weak", 2.0)
    with pytest.raises(KeyError):
        load_split(tmp_path, "test", 2.0)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nowhere")


def test_label_rasterization():
    y = strong_frame_labels({"a": [EventInterval("hum", 0.032, 0.064)]}, ["a", "b"], ["hum"], 10)
    np.testing.assert_array_equal(y[0, 0, :5], [0, 0, 1, 1, 0])
    assert not y[1].any()
    with pytest.raises(KeyError):
        weak_vectors({"a": ["bell"]}, ["a"], ["hum"])


def test_run_config_roundtrip(tmp_path):
    cfg = config.smoke_config()
    cfg.seed = 9
    cfg.synth = replace(cfg.synth, n_strong=5)
    config.save(cfg, tmp_path / "c.txt")
    back = config.load(tmp_path / "c.txt")
    assert back == cfg


def test_config_text_features():
    cfg = config.parse("# comment\nseed = 4\nmodel.preset = tfd  # inline\ntraining.epochs = 3\n")
    assert cfg.seed == 4 and cfg.model.variant == "tfd" and cfg.training.epochs == 3
    with pytest.raises(KeyError):
        config.parse("optimizer.lr = 1")
    with pytest.raises(KeyError):
        config.parse("training.momentum = 1")
    with pytest.raises(ValueError):
        config.parse("training.epochs")
