from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from tapsed.config import smoke_config
from tapsed.model import (
    CRNN, ModelConfig, build_model, count_params, load_checkpoint, param_breakdown, preset, save_checkpoint,
)
from tapsed.tensor import no_grad


@pytest.fixture(scope="module")
def small_cfg():
    return replace(smoke_config().model, n_mels=16, pools=((2, 2), (2, 2), (1, 2), (1, 2), (1, 1), (1, 1), (1, 1)))


def test_forward_shapes_and_ranges(small_cfg):
    model = build_model(small_cfg, 0).eval()
    x = np.random.default_rng(0).normal(size=(2, 16, 24))
    with no_grad():
        strong, weak = model(x)
    assert strong.shape == (2, small_cfg.n_classes, 24 // small_cfg.time_pool)
    assert weak.shape == (2, small_cfg.n_classes)
    for a in (strong.data, weak.data):
        assert ((a > 0) & (a < 1)).all()
    # the weak output is an attention-weighted mean of the strong track
    assert (weak.data <= strong.data.max(-1) + 1e-12).all()
    assert (weak.data >= strong.data.min(-1) - 1e-12).all()


def test_seeded_build_is_deterministic(small_cfg):
    a, b = build_model(small_cfg, 3).state_dict(), build_model(small_cfg, 3).state_dict()
    c = build_model(small_cfg, 4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith("weight"))


def test_rejects_wrong_input(small_cfg):
    model = build_model(small_cfg, 0)
    with pytest.raises(ValueError):
        model(np.zeros((1, 8, 24)))
    with pytest.raises(ValueError):
        model(np.zeros((1, 16, 2)))


def test_breakdown_sums_to_total():
    model = build_model(preset("tfd"), 0)
    assert sum(param_breakdown(model).values()) == count_params(model)


def test_tfd_adds_parameters_only_in_tap():
    fdy = dict(build_model(preset("fdy")).named_parameters())
    tfd = dict(build_model(preset("tfd")).named_parameters())
    extra = set(tfd) - set(fdy)
    assert extra and all(".tap." in n for n in extra)
    assert set(fdy) <= set(tfd)


def test_pfd_ladder_is_monotone():
    counts = [count_params(build_model(preset("tap_pfd", branch_fraction=Fraction(k, 32))))
              for k in (1, 2, 4, 8, 16, 32)]
    assert counts == sorted(counts) and len(set(counts)) == len(counts)


@pytest.mark.parametrize("cfg", [
    ModelConfig(n_mels=100),
    ModelConfig(activation="gelu"),
    ModelConfig(dropout=1.0),
    ModelConfig(variant="pfd", branch_fraction=Fraction(1, 3)),
    ModelConfig(variant="mdfd", dilations=((1,),) * 9, branch_fraction=Fraction(1, 8)),
    ModelConfig(width=Fraction(1, 3)),
])
def test_invalid_configs(cfg):
    with pytest.raises(ValueError):
        cfg.validate()


def test_config_dict_roundtrip():
    for name in ("baseline", "dfd", "mdfd", "tap_mdfd"):
        cfg = preset(name)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        ModelConfig.from_dict({"colour": "red"})
    with pytest.raises(KeyError):
        preset("resnet")


def test_checkpoint_roundtrip(tmp_path, small_cfg):
    model = build_model(small_cfg, 1)
    state = model.state_dict()
    state["extra.f32"] = np.arange(3, dtype=np.float32)
    save_checkpoint(tmp_path / "ck.bin", state, "hello = 1\n")
    loaded, text = load_checkpoint(tmp_path / "ck.bin")
    assert text == "hello = 1\n"
    assert loaded["extra.f32"].dtype == np.float32
    for k, v in state.items():
        np.testing.assert_array_equal(loaded[k], v)
    del loaded["extra.f32"]
    other = build_model(small_cfg, 2)
    other.load_state_dict(loaded)
    x = np.random.default_rng(0).normal(size=(1, 16, 8))
    with no_grad():
        np.testing.assert_array_equal(model.eval()(x).strong.data, other.eval()(x).strong.data)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")


def test_load_state_dict_strict(small_cfg):
    model = build_model(small_cfg, 0)
    state = model.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        model.load_state_dict(state)


def test_float32_forward(small_cfg):
    model = build_model(small_cfg, 0).astype(np.float32).eval()
    with no_grad():
        out = model(np.zeros((1, 16, 8)))
    assert out.strong.dtype == np.float32
    assert isinstance(model, CRNN)
