"""Turn a dataset directory (audio + manifests) into training arrays."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .evaluation.io import read_strong_tsv, read_unlabeled_tsv, read_weak_tsv
from .evaluation.postprocess import EventInterval, events_to_frames
from .frontend import HOP, SAMPLE_RATE, features_from_file, n_frames
from .synth import CLASSES
from .training import TrainData

FEATURE_FRAME_SECONDS = HOP / SAMPLE_RATE


def _features(audio_dir: Path, names: Sequence[str], clip_seconds: float) -> np.ndarray:
    if not names:
        return np.zeros((0, 128, n_frames(int(round(clip_seconds * SAMPLE_RATE)))))
    missing = [n for n in names if not (audio_dir / n).is_file()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} audio files missing under {audio_dir}, e.g. {missing[0]}")
    return np.stack([features_from_file(audio_dir / n, clip_seconds) for n in names])


def strong_frame_labels(truth: Dict[str, List[EventInterval]], names: Sequence[str], classes: Sequence[str],
                        frames: int) -> np.ndarray:
    return np.stack([events_to_frames(truth.get(n, []), classes, frames, FEATURE_FRAME_SECONDS) for n in names])


def weak_vectors(labels: Dict[str, List[str]], names: Sequence[str], classes: Sequence[str]) -> np.ndarray:
    idx = {c: i for i, c in enumerate(classes)}
    y = np.zeros((len(names), len(classes)))
    for r, n in enumerate(names):
        for lab in labels[n]:
            if lab not in idx:
                raise KeyError(f"{n}: unknown label {lab!r}")
            y[r, idx[lab]] = 1.0
    return y


def load_split(root, split: str, clip_seconds: float = 10.0) -> Tuple[List[str], np.ndarray]:
    """Clip names and features of ``audio/<split>`` as listed in its manifest."""
    root = Path(root)
    meta = root / "metadata"
    if split in ("strong", "validation"):
        names = sorted(read_strong_tsv(meta / f"{split}.tsv"))
    elif split == "weak":
        names = sorted(read_weak_tsv(meta / "weak.tsv"))
    elif split == "unlabeled":
        names = sorted(read_unlabeled_tsv(meta / "unlabeled.tsv"))
    else:
        raise KeyError(f"unknown split {split!r}")
    return names, _features(root / "audio" / split, names, clip_seconds)


def load_dataset(root, classes: Sequence[str] = CLASSES, clip_seconds: float = 10.0) -> TrainData:
    root = Path(root)
    meta = root / "metadata"
    if not meta.is_dir():
        raise FileNotFoundError(f"no metadata directory under {root}")
    s_names, s_x = load_split(root, "strong", clip_seconds)
    w_names, w_x = load_split(root, "weak", clip_seconds)
    _, u_x = load_split(root, "unlabeled", clip_seconds)
    frames = s_x.shape[-1]
    s_y = strong_frame_labels(read_strong_tsv(meta / "strong.tsv"), s_names, classes, frames)
    w_y = weak_vectors(read_weak_tsv(meta / "weak.tsv"), w_names, classes)
    val_x = val_names = val_truth = None
    if (meta / "validation.tsv").is_file():
        val_truth = read_strong_tsv(meta / "validation.tsv")
        val_names, val_x = load_split(root, "validation", clip_seconds)
    return TrainData(s_x, s_y, w_x, w_y, u_x, val_x, val_names, val_truth, tuple(classes))
