"""From frame posteriors to event lists."""

from __future__ import annotations

from typing import Dict, List, NamedTuple, Sequence

import numpy as np

FRAME_SECONDS = 256 * 4 / 16000  # hop x time-pool factor at 16 kHz


class EventInterval(NamedTuple):
    label: str
    onset: float
    offset: float


def weak_mask(strong: np.ndarray, weak: np.ndarray, mode: str = "min") -> np.ndarray:
    """Cap strong posteriors (classes, T) by the clip-level weak posterior per class.

    ``mode="min"`` returns min(strong, weak); ``mode="gate"`` zeroes the
    frames whose strong value exceeds the weak value.
    """
    strong = np.asarray(strong, dtype=np.float64)
    w = np.asarray(weak, dtype=np.float64)[..., None]
    if mode == "min":
        return np.minimum(strong, w)
    if mode == "gate":
        return np.where(strong > w, 0.0, strong)
    raise ValueError(f"unknown weak-mask mode {mode!r}")


def median_filter(track: np.ndarray, length: int = 7) -> np.ndarray:
    """Sliding median along the last axis with symmetric (edge-repeating) reflection."""
    if length < 1 or length % 2 == 0:
        raise ValueError(f"median filter length must be a positive odd number, got {length}")
    track = np.asarray(track, dtype=np.float64)
    if length == 1:
        return track.copy()
    half = length // 2
    pad = [(0, 0)] * (track.ndim - 1) + [(half, half)]
    padded = np.pad(track, pad, mode="symmetric")
    windows = np.lib.stride_tricks.sliding_window_view(padded, length, axis=-1)
    return np.median(windows, axis=-1)


def runs(binary: np.ndarray):
    """(start, stop) index pairs of maximal runs of True, stop exclusive."""
    b = np.concatenate([[False], np.asarray(binary, dtype=bool), [False]])
    edges = np.flatnonzero(b[1:] != b[:-1])
    return list(zip(edges[::2], edges[1::2]))


def segment_binary(binary: np.ndarray, classes: Sequence[str], frame_seconds: float = FRAME_SECONDS,
                   clip_seconds: float = 10.0) -> List[EventInterval]:
    events = []
    for c, row in enumerate(np.asarray(binary, dtype=bool)):
        for start, stop in runs(row):
            onset = min(start * frame_seconds, clip_seconds)
            offset = min(stop * frame_seconds, clip_seconds)
            if offset > onset:
                events.append(EventInterval(classes[c], float(onset), float(offset)))
    events.sort(key=lambda e: (e.onset, e.label))
    return events


def binarize_and_segment(posteriors: np.ndarray, threshold: float, classes: Sequence[str],
                         frame_seconds: float = FRAME_SECONDS, clip_seconds: float = 10.0,
                         median_length: int = 1) -> List[EventInterval]:
    """Threshold (classes, T) posteriors, optionally median-filter, and cut runs into events."""
    binary = np.asarray(posteriors) >= threshold
    if median_length > 1:
        binary = median_filter(binary.astype(np.float64), median_length) >= 0.5
    return segment_binary(binary, classes, frame_seconds, clip_seconds)


def default_thresholds(n: int = 50) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def decode_clip(strong: np.ndarray, weak: np.ndarray, thresholds: Sequence[float], classes: Sequence[str],
                frame_seconds: float = FRAME_SECONDS, clip_seconds: float = 10.0, median_length: int = 7,
                mask_mode: str = "min") -> Dict[float, List[EventInterval]]:
    """Weak masking, then per threshold: binarize, median filter, segment."""
    masked = weak_mask(strong, weak, mask_mode) if mask_mode != "none" else np.asarray(strong)
    return {
        float(t): binarize_and_segment(masked, t, classes, frame_seconds, clip_seconds, median_length)
        for t in thresholds
    }


def decode_batch(strong: np.ndarray, weak: np.ndarray, clip_ids: Sequence[str], thresholds, classes,
                 **kwargs) -> Dict[float, Dict[str, List[EventInterval]]]:
    """Per-threshold detection lists over many clips."""
    out: Dict[float, Dict[str, List[EventInterval]]] = {float(t): {} for t in thresholds}
    for cid, s, w in zip(clip_ids, strong, weak):
        per = decode_clip(s, w, thresholds, classes, **kwargs)
        for t, events in per.items():
            out[t][cid] = events
    return out


def events_to_frames(events: Sequence[EventInterval], classes: Sequence[str], n_frames: int,
                     frame_seconds: float) -> np.ndarray:
    """Rasterize events into a (classes, n_frames) 0/1 matrix (frame active if it overlaps the event)."""
    idx = {c: i for i, c in enumerate(classes)}
    y = np.zeros((len(classes), n_frames))
    for e in events:
        if e.label not in idx:
            continue
        start = int(np.floor(e.onset / frame_seconds + 1e-9))
        stop = int(np.ceil(e.offset / frame_seconds - 1e-9))
        y[idx[e.label], max(start, 0): min(stop, n_frames)] = 1.0
    return y
