"""Synthetic 10-class sound event dataset with exact annotations.

Five transient archetypes (click train, chirp burst, noise burst, plosive
pulse, decaying strike) and five quasi-stationary ones (steady tone, band
noise, hum, slow AM tone, broadband wash). Each event's envelope is nonzero
over its whole annotated support and zero outside it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from scipy import signal

from .evaluation.io import write_strong_tsv, write_unlabeled_tsv, write_weak_tsv
from .evaluation.postprocess import EventInterval
from .frontend import SAMPLE_RATE, write_wav

TRANSIENT = ("click_train", "chirp_burst", "noise_burst", "plosive_pulse", "decaying_strike")
STATIONARY = ("steady_tone", "band_noise", "hum", "slow_am_tone", "broadband_wash")
CLASSES = TRANSIENT + STATIONARY

SPLITS = ("strong", "weak", "unlabeled", "validation")
GRID = 16  # event boundaries fall on 1 ms sample multiples
PEAK = 0.3


@dataclass
class SynthConfig:
    n_strong: int = 16
    n_weak: int = 16
    n_unlabeled: int = 32
    n_validation: int = 16
    min_events: int = 1
    max_events: int = 3
    polyphony: int = 2
    snr_low: float = 6.0
    snr_high: float = 20.0
    clip_seconds: float = 10.0

    def validate(self) -> None:
        if not 0 <= self.min_events <= self.max_events:
            raise ValueError("need 0 <= min_events <= max_events")
        if self.polyphony < 1:
            raise ValueError("polyphony must be >= 1")
        if self.snr_low > self.snr_high:
            raise ValueError("snr_low must not exceed snr_high")

    def count(self, split: str) -> int:
        return getattr(self, f"n_{split}")


def _duration_range(label: str) -> Tuple[float, float]:
    return (0.25, 1.0) if label in TRANSIENT else (1.5, 4.0)


def render_event(label: str, n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """One event of ``n`` samples, peak-scaled to ``PEAK``."""
    t = np.arange(n) / sr
    dur = n / sr
    if label == "click_train":
        period = int(sr * rng.uniform(0.02, 0.04))
        x = np.zeros(n)
        x[::period] = 1.0
        kernel = np.exp(-np.arange(64) / 8.0) * np.sin(2 * np.pi * 3000 * np.arange(64) / sr)
        x = np.convolve(x, kernel)[:n] + 0.05 * rng.standard_normal(n)
    elif label == "chirp_burst":
        f0, f1 = rng.uniform(500, 1500), rng.uniform(3000, 6000)
        x = signal.chirp(t, f0, dur, f1)
    elif label == "noise_burst":
        b, a = signal.butter(2, [2000, 6000], btype="band", fs=sr)
        x = signal.lfilter(b, a, rng.standard_normal(n))
    elif label == "plosive_pulse":
        x = signal.lfilter([1.0], [1.0, -0.95], rng.standard_normal(n))
        x *= 0.2 + np.exp(-t / 0.05)
    elif label == "decaying_strike":
        f = rng.uniform(400, 1200)
        x = (np.sin(2 * np.pi * f * t) + 0.5 * np.sin(2 * np.pi * 2.76 * f * t)) * (0.15 + np.exp(-t / 0.1))
    elif label == "steady_tone":
        x = np.sin(2 * np.pi * rng.uniform(600, 2500) * t)
    elif label == "band_noise":
        lo = rng.uniform(300, 1000)
        b, a = signal.butter(2, [lo, 2 * lo], btype="band", fs=sr)
        x = signal.lfilter(b, a, rng.standard_normal(n))
    elif label == "hum":
        f = rng.choice([50.0, 60.0]) * rng.integers(2, 4)
        x = sum(np.sin(2 * np.pi * k * f * t) / k for k in range(1, 6))
    elif label == "slow_am_tone":
        x = np.sin(2 * np.pi * rng.uniform(300, 900) * t) * (0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(2, 4) * t))
    elif label == "broadband_wash":
        x = rng.standard_normal(n) * (0.7 + 0.3 * np.sin(2 * np.pi * 0.5 * t))
    else:
        raise KeyError(f"unknown class {label!r}")
    # short raised-cosine ramps avoid clicks while keeping the edges audible
    ramp = min(32, n // 4)
    if ramp:
        w = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp) + 1) / (ramp + 1))
        w = 0.3 + 0.7 * w
        x[:ramp] *= w
        x[-ramp:] *= w[::-1]
    return PEAK * x / np.max(np.abs(x))


def _place_events(rng: np.random.Generator, cfg: SynthConfig) -> List[EventInterval]:
    n_clip = int(round(cfg.clip_seconds * SAMPLE_RATE)) // GRID
    cover = np.zeros(n_clip, dtype=int)
    events = []
    n_events = int(rng.integers(cfg.min_events, cfg.max_events + 1))
    for _ in range(n_events):
        label = CLASSES[int(rng.integers(len(CLASSES)))]
        lo, hi = _duration_range(label)
        length = int(round(rng.uniform(lo, hi) * SAMPLE_RATE / GRID))
        length = min(length, n_clip)
        for _attempt in range(20):
            start = int(rng.integers(0, n_clip - length + 1))
            if cover[start:start + length].max(initial=0) < cfg.polyphony:
                cover[start:start + length] += 1
                events.append(EventInterval(label, start * GRID / SAMPLE_RATE, (start + length) * GRID / SAMPLE_RATE))
                break
    events.sort(key=lambda e: (e.onset, e.label))
    return events


def generate_clip(rng: np.random.Generator, cfg: SynthConfig) -> Tuple[np.ndarray, List[EventInterval]]:
    """Waveform and its exact event list. Clips without events are silent."""
    n = int(round(cfg.clip_seconds * SAMPLE_RATE))
    events = _place_events(rng, cfg)
    x = np.zeros(n)
    powers = []
    for e in events:
        a, b = int(round(e.onset * SAMPLE_RATE)), int(round(e.offset * SAMPLE_RATE))
        ev = render_event(e.label, b - a, rng)
        powers.append(np.mean(ev ** 2))
        x[a:b] += ev
    if events:
        snr = rng.uniform(cfg.snr_low, cfg.snr_high)
        noise_rms = np.sqrt(np.mean(powers) / 10 ** (snr / 10))
        x += noise_rms * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0), events


def clip_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, SPLITS.index(split), index]))


def clip_name(split: str, index: int) -> str:
    return f"{split}_{index:05d}.wav"


def synthesize(cfg: SynthConfig, out_dir, seed: int = 0) -> Dict[str, Dict[str, List[EventInterval]]]:
    """Write WAVs under ``out_dir/audio/<split>/`` and manifests under ``out_dir/metadata/``.

    Returns the ground truth per split. Splits draw from disjoint seed streams.
    """
    cfg.validate()
    out = Path(out_dir)
    meta = out / "metadata"
    meta.mkdir(parents=True, exist_ok=True)
    truth: Dict[str, Dict[str, List[EventInterval]]] = {}
    for split in SPLITS:
        d = out / "audio" / split
        d.mkdir(parents=True, exist_ok=True)
        truth[split] = {}
        for i in range(cfg.count(split)):
            x, events = generate_clip(clip_rng(seed, split, i), cfg)
            name = clip_name(split, i)
            write_wav(d / name, x)
            truth[split][name] = events
    write_strong_tsv(meta / "strong.tsv", truth["strong"], keep_empty=True)
    write_strong_tsv(meta / "validation.tsv", truth["validation"], keep_empty=True)
    write_weak_tsv(meta / "weak.tsv", {k: sorted({e.label for e in v}) for k, v in truth["weak"].items()})
    write_unlabeled_tsv(meta / "unlabeled.tsv", list(truth["unlabeled"]))
    return truth


def energy_support(x: np.ndarray, frame: int, threshold: float) -> np.ndarray:
    """Boolean per-frame activity: mean-square energy above ``threshold``."""
    n = len(x) // frame
    e = np.mean(x[: n * frame].reshape(n, frame) ** 2, axis=1)
    return e > threshold
