"""Input checks shared by the estimator API and the CLI."""

from __future__ import annotations

import numpy as np


def check_waveforms(X):
    """Return a list of finite 1-d float64 waveforms."""
    if isinstance(X, np.ndarray) and X.ndim == 1:
        X = [X]
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = list(X)
    out = []
    for i, w in enumerate(X):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError(f"waveform {i} must be 1-d, got shape {w.shape}")
        if not np.isfinite(w).all():
            raise ValueError(f"waveform {i} contains NaN or Inf")
        out.append(w)
    if not out:
        raise ValueError("no waveforms given")
    return out


def check_features(X, n_mels=None) -> np.ndarray:
    """Features as (n_clips, n_mels, frames) float array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise ValueError(f"expected features of shape (n_clips, n_mels, frames), got {X.shape}")
    if n_mels is not None and X.shape[1] != n_mels:
        raise ValueError(f"expected {n_mels} mel bins, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ValueError("features contain NaN or Inf")
    return X


def check_strong_labels(y, n_clips: int, n_classes: int, n_frames: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n_clips, n_classes, n_frames):
        raise ValueError(f"strong labels must be {(n_clips, n_classes, n_frames)}, got {y.shape}")
    if ((y < 0) | (y > 1)).any():
        raise ValueError("strong labels must lie in [0, 1]")
    return y


def check_weak_labels(y, n_clips: int, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n_clips, n_classes):
        raise ValueError(f"weak labels must be {(n_clips, n_classes)}, got {y.shape}")
    if ((y < 0) | (y > 1)).any():
        raise ValueError("weak labels must lie in [0, 1]")
    return y


def check_probability(p, name="value"):
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"{name} must be in (0, 1), got {p}")
    return p
