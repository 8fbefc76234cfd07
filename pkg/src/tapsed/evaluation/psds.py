"""Intersection-based polyphonic sound detection score and class-wise F1.

Matching at one operating point, per clip and class:

* a detection is accepted when the fraction of its length covered by
  ground-truth events of its class is at least ``dtc``; otherwise it is a
  false positive;
* a ground-truth event is a true positive when the fraction of its length
  covered by accepted detections of its class is at least ``gtc``.

The PSD-ROC of each class is the step curve of its best true-positive rate
reachable at a false-positive rate (per hour) not above ``e``. Classes are
combined into an effective TPR ``mean - alpha_st * std`` (floored at zero)
and the score is the area under it on ``[0, e_max]`` divided by ``e_max``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .postprocess import EventInterval, default_thresholds

logger = logging.getLogger(__name__)

Detections = Mapping[str, Sequence[EventInterval]]


@dataclass
class PsdsConfig:
    dtc: float = 0.7
    gtc: float = 0.7
    cttc: float = 0.3  # unused while alpha_ct == 0
    alpha_st: float = 1.0
    alpha_ct: float = 0.0
    e_max: float = 100.0
    thresholds: np.ndarray = field(default_factory=default_thresholds)

    def validate(self) -> None:
        if not (0 < self.dtc <= 1 and 0 < self.gtc <= 1):
            raise ValueError("dtc and gtc must lie in (0, 1]")
        if self.alpha_ct != 0:
            raise ValueError("cross-trigger penalties are not supported (alpha_ct must be 0)")
        if self.e_max <= 0:
            raise ValueError("e_max must be positive")
        th = np.asarray(self.thresholds, dtype=float)
        if th.ndim != 1 or len(th) == 0 or np.any(np.diff(th) <= 0):
            raise ValueError("thresholds must be strictly increasing")


@dataclass
class OperatingPoint:
    tp: np.ndarray  # matched ground-truth events per class
    n_gt: np.ndarray
    fp: np.ndarray  # rejected detections per class
    n_det: np.ndarray
    duration_hours: float

    @property
    def tpr(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.n_gt > 0, self.tp / np.maximum(self.n_gt, 1), np.nan)

    @property
    def fpr(self) -> np.ndarray:
        return self.fp / self.duration_hours


@dataclass
class PsdsResult:
    score: float
    fpr_axis: np.ndarray
    etpr: np.ndarray
    classes: List[str]
    per_class_tpr: np.ndarray  # (classes, thresholds)
    per_class_fpr: np.ndarray


def _overlap(a0, a1, b0, b1) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def _group(events: Sequence[EventInterval]) -> Dict[str, List[Tuple[float, float]]]:
    out: Dict[str, List[Tuple[float, float]]] = {}
    for e in events:
        out.setdefault(e.label, []).append((float(e.onset), float(e.offset)))
    return out


def _match_clip_class(dets, gts, dtc, gtc) -> Tuple[int, int]:
    """(true-positive ground truths, false-positive detections) for one clip/class."""
    accepted = []
    fp = 0
    for d0, d1 in dets:
        length = d1 - d0
        if length <= 0:
            continue
        covered = sum(_overlap(d0, d1, g0, g1) for g0, g1 in gts)
        if covered / length >= dtc:
            accepted.append((d0, d1))
        else:
            fp += 1
    tp = 0
    for g0, g1 in gts:
        length = g1 - g0
        if length <= 0:
            continue
        covered = sum(_overlap(g0, g1, d0, d1) for d0, d1 in accepted)
        if covered / length >= gtc:
            tp += 1
    return tp, fp


def operating_point(detections: Detections, ground_truth: Detections, classes: Sequence[str],
                    duration_hours: float, dtc: float = 0.7, gtc: float = 0.7) -> OperatingPoint:
    idx = {c: i for i, c in enumerate(classes)}
    C = len(classes)
    tp = np.zeros(C, dtype=int)
    fp = np.zeros(C, dtype=int)
    n_gt = np.zeros(C, dtype=int)
    n_det = np.zeros(C, dtype=int)
    for clip in set(ground_truth) | set(detections):
        g = _group(ground_truth.get(clip, ()))
        d = _group(detections.get(clip, ()))
        for label in set(g) | set(d):
            if label not in idx:
                continue
            i = idx[label]
            t, f = _match_clip_class(d.get(label, []), g.get(label, []), dtc, gtc)
            tp[i] += t
            fp[i] += f
            n_gt[i] += sum(1 for a, b in g.get(label, []) if b > a)
            n_det[i] += len(d.get(label, []))
    return OperatingPoint(tp, n_gt, fp, n_det, duration_hours)


def _step_max(fpr: np.ndarray, tpr: np.ndarray, at: np.ndarray) -> np.ndarray:
    """Best tpr over points with fpr <= each value of ``at`` (0 where none)."""
    order = np.argsort(fpr, kind="stable")
    f = fpr[order]
    best = np.maximum.accumulate(tpr[order])
    pos = np.searchsorted(f, at, side="right") - 1
    return np.where(pos >= 0, best[np.clip(pos, 0, None)], 0.0)


def psds_from_points(points: Sequence[OperatingPoint], classes: Sequence[str], cfg: PsdsConfig) -> PsdsResult:
    tpr = np.stack([p.tpr for p in points], axis=1)  # (C, J)
    fpr = np.stack([p.fpr for p in points], axis=1)
    valid = ~np.isnan(tpr[:, 0])
    for c in np.flatnonzero(~valid):
        logger.warning("class %r has no ground-truth events; excluded from PSDS", classes[c])
    kept = [classes[c] for c in np.flatnonzero(valid)]
    if not kept:
        raise ValueError("no class has ground-truth events")
    tv, fv = tpr[valid], fpr[valid]
    axis = np.unique(np.concatenate([[0.0], fv.ravel()]))
    axis = axis[axis <= cfg.e_max]
    curves = np.stack([_step_max(fv[c], tv[c], axis) for c in range(len(kept))])
    etpr = curves.mean(axis=0) - cfg.alpha_st * curves.std(axis=0)
    etpr = np.maximum(etpr, 0.0)
    widths = np.diff(np.concatenate([axis, [cfg.e_max]]))
    score = float(np.sum(etpr * widths) / cfg.e_max)
    return PsdsResult(score, axis, etpr, kept, tpr, fpr)


def psds(detections_per_threshold: Sequence[Detections], ground_truth: Detections, classes: Sequence[str],
         cfg: PsdsConfig = None, duration_hours: float = None) -> PsdsResult:
    """PSDS over a list of detection sets, one per operating point.

    ``duration_hours`` defaults to 10 s per clip present in the ground truth.
    """
    cfg = cfg or PsdsConfig()
    if duration_hours is None:
        duration_hours = len(ground_truth) * 10.0 / 3600.0
    if duration_hours <= 0:
        raise ValueError("total duration must be positive")
    points = [operating_point(d, ground_truth, classes, duration_hours, cfg.dtc, cfg.gtc)
              for d in detections_per_threshold]
    return psds_from_points(points, classes, cfg)


def classwise_f1(detections: Detections, ground_truth: Detections, classes: Sequence[str],
                 dtc: float = 0.7, gtc: float = 0.7) -> Dict[str, float]:
    """Intersection-based F1 per class at one operating point.

    Precision is TP / (TP + FP) with TP counted on ground-truth events and
    FP on rejected detections; recall is TP / number of ground-truth events.
    """
    op = operating_point(detections, ground_truth, classes, 1.0, dtc, gtc)
    out = {}
    for i, c in enumerate(classes):
        tp, fp, n = op.tp[i], op.fp[i], op.n_gt[i]
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / n if n else 0.0
        out[c] = 2 * p * r / (p + r) if p + r else 0.0
    return out
