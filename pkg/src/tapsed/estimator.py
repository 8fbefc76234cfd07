"""scikit-learn style wrapper around the CRNN and the mean-teacher trainer."""

from __future__ import annotations

from dataclasses import replace
from typing import List, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import PsdsConfig, decode_batch, default_thresholds, psds
from .evaluation.postprocess import EventInterval
from .frontend import HOP, SAMPLE_RATE
from .model import ModelConfig, preset
from .training import TrainConfig, TrainData, Trainer, predict_arrays
from .validation import check_features, check_strong_labels, check_weak_labels


class SoundEventDetector(BaseEstimator):
    """Frame-level multi-label detector on log-mel features.

    ``fit`` takes strong-labelled clips (features and frame labels on the
    feature frame grid) and optionally weak-labelled and unlabelled clips.
    ``predict_proba`` returns frame posteriors on the pooled output grid;
    ``predict`` returns event lists.
    """

    def __init__(self, architecture: str = "baseline", model_config: ModelConfig = None, epochs: int = 10,
                 batch_strong: int = 12, batch_weak: int = 12, batch_unlabeled: int = 24, lr: float = 1e-3,
                 dtype: str = "float32", threshold: float = 0.5, median_length: int = 7,
                 classes: Sequence[str] = None, seed: int = 0):
        self.architecture = architecture
        self.model_config = model_config
        self.epochs = epochs
        self.batch_strong = batch_strong
        self.batch_weak = batch_weak
        self.batch_unlabeled = batch_unlabeled
        self.lr = lr
        self.dtype = dtype
        self.threshold = threshold
        self.median_length = median_length
        self.classes = classes
        self.seed = seed

    def _model_config(self, n_classes: int, n_mels: int) -> ModelConfig:
        cfg = self.model_config if self.model_config is not None else preset(self.architecture)
        return replace(cfg, n_classes=n_classes, n_mels=n_mels)

    def fit(self, X, y, X_weak=None, y_weak=None, X_unlabeled=None):
        X = check_features(X)
        n, n_mels, frames = X.shape
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 3:
            raise ValueError(f"strong labels must be (n_clips, n_classes, frames), got {y.shape}")
        n_classes = y.shape[1]
        y = check_strong_labels(y, n, n_classes, frames)
        if X_weak is None:
            X_weak, y_weak = np.zeros((0, n_mels, frames)), np.zeros((0, n_classes))
        X_weak = check_features(X_weak, n_mels) if len(X_weak) else np.zeros((0, n_mels, frames))
        y_weak = check_weak_labels(y_weak, len(X_weak), n_classes)
        if X_unlabeled is None or len(X_unlabeled) == 0:
            X_unlabeled = np.zeros((0, n_mels, frames))
        else:
            X_unlabeled = check_features(X_unlabeled, n_mels)
        classes = tuple(self.classes) if self.classes is not None else tuple(str(i) for i in range(n_classes))
        if len(classes) != n_classes:
            raise ValueError(f"{len(classes)} class names for {n_classes} label rows")

        self.model_config_ = self._model_config(n_classes, n_mels)
        tcfg = TrainConfig(epochs=self.epochs, batch_strong=self.batch_strong, batch_weak=self.batch_weak,
                           batch_unlabeled=self.batch_unlabeled, lr=self.lr, dtype=self.dtype)
        data = TrainData(X, y, X_weak, y_weak, X_unlabeled, classes=classes)
        self.trainer_ = Trainer(self.model_config_, tcfg, self.seed)
        self.history_ = self.trainer_.fit(data)
        self.classes_ = np.array(classes)
        self.n_features_in_ = n_mels
        return self

    @property
    def frame_seconds_(self) -> float:
        return HOP * self.model_config_.time_pool / SAMPLE_RATE

    def _posteriors(self, X):
        check_is_fitted(self, "trainer_")
        X = check_features(X, self.n_features_in_)
        return predict_arrays(self.trainer_.student, X)

    def predict_proba(self, X) -> np.ndarray:
        """Frame posteriors, shape (n_clips, n_classes, output_frames)."""
        return self._posteriors(X)[0]

    def predict_clip_proba(self, X) -> np.ndarray:
        """Clip-level posteriors, shape (n_clips, n_classes)."""
        return self._posteriors(X)[1]

    def _decode(self, X, thresholds):
        strong, weak = self._posteriors(X)
        ids = [str(i) for i in range(len(strong))]
        clip_seconds = strong.shape[-1] * self.frame_seconds_
        dets = decode_batch(strong, weak, ids, thresholds, self._class_names(), frame_seconds=self.frame_seconds_,
                            clip_seconds=clip_seconds, median_length=self.median_length)
        return ids, dets

    def _class_names(self) -> List[str]:
        return [str(c) for c in self.classes_]

    def predict(self, X) -> List[List[EventInterval]]:
        ids, dets = self._decode(X, [self.threshold])
        per = dets[float(self.threshold)]
        return [per[i] for i in ids]

    def score(self, X, y) -> float:
        """PSDS1 against ``y``, one list of :class:`EventInterval` per clip."""
        cfg = PsdsConfig(thresholds=default_thresholds(50))
        ids, dets = self._decode(X, cfg.thresholds)
        truth = {i: list(ev) for i, ev in zip(ids, y)}
        return psds([dets[float(t)] for t in cfg.thresholds], truth, self._class_names(), cfg).score
