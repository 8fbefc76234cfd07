"""Mean-teacher training: losses, EMA, augmentations, optimizer and loop."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .model import CRNN, ModelConfig, Predictions, build_model
from .nn import Module
from .tensor import Tensor, get_default_dtype, no_grad, set_default_dtype

logger = logging.getLogger(__name__)

LN10_OVER_20 = math.log(10.0) / 20.0


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    w_weak: float = 0.5
    w_cons_max: float = 2.0
    ramp_epochs: int = 50
    ramp_shape: float = 5.0


def consistency_ramp(epoch: float, w_max: float = 2.0, ramp_epochs: int = 50, shape: float = 5.0) -> float:
    """``w_max * exp(-shape * (1 - min(epoch / ramp_epochs, 1))**2)``"""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    x = min(epoch / ramp_epochs, 1.0) if ramp_epochs > 0 else 1.0
    return w_max * math.exp(-shape * (1.0 - x) ** 2)


class LossTerms(NamedTuple):
    total: Tensor
    strong: Tensor
    weak: Tensor
    consistency: Tensor
    w_cons: float


def _const(v: float, like: Tensor) -> Tensor:
    return Tensor(np.asarray(v, dtype=like.dtype))


def consistency_loss(student: Predictions, teacher: Predictions, stop_gradient: str = "teacher") -> Tensor:
    """MSE between teacher and student strong and weak predictions.

    ``stop_gradient="teacher"`` lets the gradient reach the student;
    ``"student"`` detaches both sides, making the term a constant.
    """
    ts, tw = teacher.strong.detach(), teacher.weak.detach()
    if stop_gradient == "teacher":
        ss, sw = student.strong, student.weak
    elif stop_gradient == "student":
        ss, sw = student.strong.detach(), student.weak.detach()
    else:
        raise ValueError(f"stop_gradient must be 'teacher' or 'student', got {stop_gradient!r}")
    return ops.add(ops.mse(ss, ts), ops.mse(sw, tw))


def total_loss(
    student: Predictions,
    teacher: Predictions,
    strong_labels: np.ndarray,
    weak_labels: np.ndarray,
    n_strong: int,
    n_weak: int,
    weights: LossWeights = None,
    epoch: float = 0,
    stop_gradient: str = "teacher",
) -> LossTerms:
    """Strong BCE on the first ``n_strong`` clips, weak BCE on the next ``n_weak``,
    consistency on all clips, combined as ``strong + w_weak * weak + w_c * cons``."""
    weights = weights or LossWeights()
    s = student.strong
    if n_strong:
        l_strong = ops.binary_cross_entropy(s[:n_strong], strong_labels)
    else:
        l_strong = _const(0.0, s)
    if n_weak:
        l_weak = ops.binary_cross_entropy(student.weak[n_strong:n_strong + n_weak], weak_labels)
    else:
        l_weak = _const(0.0, s)
    l_cons = consistency_loss(student, teacher, stop_gradient)
    w_c = consistency_ramp(epoch, weights.w_cons_max, weights.ramp_epochs, weights.ramp_shape)
    total = ops.add(ops.add(l_strong, ops.scale(l_weak, weights.w_weak)), ops.scale(l_cons, w_c))
    return LossTerms(total, l_strong, l_weak, l_cons, w_c)


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

def make_teacher(student: Module) -> Module:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.set_trainable(False)
    return teacher


def ema_update(teacher: Module, student: Module, decay: float = 0.999) -> Module:
    """In place: theta_T <- decay * theta_T + (1 - decay) * theta_S."""
    tp = dict(teacher.named_parameters())
    sp = dict(student.named_parameters())
    if tp.keys() != sp.keys():
        raise KeyError(f"teacher/student parameter names differ: {sorted(set(tp) ^ set(sp))[:5]}")
    for name, t in tp.items():
        s = sp[name]
        t.data = (decay * t.data + (1.0 - decay) * s.data).astype(t.dtype, copy=False)
    return teacher


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# augmentations (numpy, label-aware)
# ---------------------------------------------------------------------------

def pool_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool frame labels along the last axis (floor mode)."""
    if factor == 1:
        return np.asarray(labels)
    T = labels.shape[-1] // factor
    v = labels[..., : T * factor].reshape(labels.shape[:-1] + (T, factor))
    return v.max(axis=-1)


def mixup(features: np.ndarray, labels: np.ndarray, rng: np.random.Generator = None, alpha: float = 0.2,
          lam=None, perm=None) -> Tuple[np.ndarray, np.ndarray]:
    """Mix each clip with a permuted partner using one lambda per pair for features and labels."""
    n = len(features)
    if n == 0:
        return features, labels
    rng = rng or np.random.default_rng()
    perm = rng.permutation(n) if perm is None else np.asarray(perm)
    lam = rng.beta(alpha, alpha, size=n) if lam is None else np.broadcast_to(np.asarray(lam, dtype=float), (n,))
    lf = lam.reshape((n,) + (1,) * (features.ndim - 1))
    ll = lam.reshape((n,) + (1,) * (labels.ndim - 1))
    return lf * features + (1 - lf) * features[perm], ll * labels + (1 - ll) * labels[perm]


def time_mask(features: np.ndarray, labels: Optional[np.ndarray], max_frames: int,
              rng: np.random.Generator = None, start: int = None, length: int = None):
    """Zero one contiguous span of frames in a clip's features and its frame labels."""
    T = features.shape[-1]
    if max_frames >= T:
        raise ValueError(f"max_frames {max_frames} must be smaller than the {T} frames")
    rng = rng or np.random.default_rng()
    if length is None:
        length = int(rng.integers(0, max_frames + 1))
    if start is None:
        start = int(rng.integers(0, T - length + 1))
    f = features.copy()
    f[..., start:start + length] = 0.0
    if labels is None:
        return f, None
    y = labels.copy()
    y[..., start:start + length] = 0.0
    return f, y


def frameshift(features: np.ndarray, labels: Optional[np.ndarray], max_shift: int,
               rng: np.random.Generator = None, shift: int = None):
    """Circularly shift features and frame labels along time by the same amount."""
    rng = rng or np.random.default_rng()
    if shift is None:
        shift = int(rng.integers(-max_shift, max_shift + 1))
    f = np.roll(features, shift, axis=-1)
    return f, (None if labels is None else np.roll(labels, shift, axis=-1))


def filter_augment(features: np.ndarray, rng: np.random.Generator = None, n_bands=(2, 5), gain_db=(-6.0, 6.0),
                   bounds=None, gains=None, return_params: bool = False):
    """Add a random constant log-gain to each of n random frequency bands.

    Gains are drawn in dB and converted to natural-log amplitude units
    (``g * ln(10) / 20``), matching natural-log magnitude features.
    """
    F = features.shape[-2]
    rng = rng or np.random.default_rng()
    if bounds is None:
        n = int(rng.integers(n_bands[0], n_bands[1] + 1))
        n = min(n, F)
        cuts = np.sort(rng.choice(np.arange(1, F), size=n - 1, replace=False)) if n > 1 else np.array([], int)
        bounds = np.concatenate([[0], cuts, [F]]).astype(int)
    bounds = np.asarray(bounds, dtype=int)
    if bounds[0] != 0 or bounds[-1] != F or np.any(np.diff(bounds) <= 0):
        raise ValueError(f"band bounds {bounds} must strictly increase from 0 to {F}")
    if gains is None:
        gains = rng.uniform(gain_db[0], gain_db[1], size=len(bounds) - 1)
    gains = np.asarray(gains, dtype=float)
    per_bin = np.repeat(gains, np.diff(bounds)) * LN10_OVER_20
    out = features + per_bin[:, None]
    if return_params:
        return out, bounds, gains
    return out


def instance_standardize(features: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero-mean, unit-variance per clip over (freq, time)."""
    x = np.asarray(features, dtype=np.float64)
    mean = x.mean(axis=(-2, -1), keepdims=True)
    std = x.std(axis=(-2, -1), keepdims=True)
    return (x - mean) / (std + eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_strong: int = 12
    batch_weak: int = 12
    batch_unlabeled: int = 24
    lr: float = 1e-3
    ema_decay: float = 0.999
    w_weak: float = 0.5
    w_cons_max: float = 2.0
    ramp_epochs: int = 50
    dtype: str = "float32"
    mixup_alpha: float = 0.2
    mixup_prob: float = 0.5
    time_mask_frames: int = 20
    frameshift_frames: int = 64
    filter_bands_min: int = 2
    filter_bands_max: int = 5
    filter_gain_db: float = 6.0
    consistency_stopgrad: str = "teacher"
    val_thresholds: int = 50
    median_length: int = 7

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_weak, self.w_cons_max, self.ramp_epochs)


@dataclass
class TrainData:
    """Clip features are (n, n_mels, frames); strong labels share the frame axis."""

    strong_x: np.ndarray
    strong_y: np.ndarray
    weak_x: np.ndarray
    weak_y: np.ndarray
    unlabeled_x: np.ndarray
    val_x: Optional[np.ndarray] = None
    val_ids: Optional[List[str]] = None
    val_truth: Optional[Dict] = None
    classes: Sequence[str] = ()


@dataclass
class EpochLog:
    epoch: int
    loss: float
    strong_loss: float
    weak_loss: float
    cons_loss: float
    val_psds1: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.loss:.6f}\t{self.strong_loss:.6f}\t{self.weak_loss:.6f}\t"
                f"{self.cons_loss:.6f}\t{self.val_psds1:.6f}")


LOG_HEADER = "epoch\tloss\tstrong_loss\tweak_loss\tcons_loss\tval_psds1"


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [int(k) for k in key]))


class _Cycler:
    """Reshuffling index cycler with its own seeded stream."""

    def __init__(self, n: int, seed: int, tag: int):
        self.n = n
        self.rng = _stream(seed, 7, tag)
        self.order = self.rng.permutation(n) if n else np.array([], int)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        if self.n == 0 or k == 0:
            return np.array([], dtype=int)
        out = []
        while len(out) < k:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(self.order[self.pos])
            self.pos += 1
        return np.array(out)


def predict_arrays(model: CRNN, features: np.ndarray, batch_size: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode strong (n, classes, Tout) and weak (n, classes) posteriors."""
    was = model.training
    model.eval()
    strong, weak = [], []
    dt = model.parameters()[0].dtype
    with no_grad():
        for i in range(0, len(features), batch_size):
            xb = instance_standardize(features[i:i + batch_size]).astype(dt)[:, None]
            pred = model(Tensor(xb, dtype=dt))
            strong.append(pred.strong.data.astype(np.float64))
            weak.append(pred.weak.data.astype(np.float64))
    model.train(was)
    return np.concatenate(strong), np.concatenate(weak)


def validation_psds1(model: CRNN, data: TrainData, cfg: TrainConfig) -> float:
    from .evaluation import PsdsConfig, decode_batch, default_thresholds, psds

    if data.val_x is None or not data.val_truth:
        return float("nan")
    strong, weak = predict_arrays(model, data.val_x)
    th = default_thresholds(cfg.val_thresholds)
    frame_s = 256 * model.cfg.time_pool / 16000
    dets = decode_batch(strong, weak, data.val_ids, th, list(data.classes), frame_seconds=frame_s,
                        median_length=cfg.median_length)
    truth = {cid: data.val_truth.get(cid, []) for cid in data.val_ids}
    try:
        return psds([dets[t] for t in th], truth, list(data.classes), PsdsConfig(thresholds=th)).score
    except ValueError:
        return float("nan")


class Trainer:
    """Owns student, teacher and optimizer; one ``run_epoch`` per epoch."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig, seed: int = 0):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.seed = seed
        prev = get_default_dtype()
        set_default_dtype(cfg.dtype)
        try:
            self.student = build_model(model_cfg, seed)
        finally:
            set_default_dtype(prev)
        self.teacher = make_teacher(self.student)
        self.opt = Adam(self.student.trainable_parameters(), lr=cfg.lr)
        self.step = 0
        self.history: List[EpochLog] = []
        self.dtype = np.dtype(cfg.dtype)

    def _augment(self, xs, ys, xw, yw, xu, rng):
        c = self.cfg
        tp = self.model_cfg.time_pool
        xs, ys = xs.copy(), ys.copy()
        for i in range(len(xs)):
            xs[i], ys[i] = frameshift(xs[i], ys[i], c.frameshift_frames, rng)
        xw = np.stack([frameshift(x, None, c.frameshift_frames, rng)[0] for x in xw]) if len(xw) else xw
        xu = np.stack([frameshift(x, None, c.frameshift_frames, rng)[0] for x in xu]) if len(xu) else xu
        if len(xs) > 1 and rng.random() < c.mixup_prob:
            xs, ys = mixup(xs, ys, rng, c.mixup_alpha)
        if len(xw) > 1 and rng.random() < c.mixup_prob:
            xw, yw = mixup(xw, yw, rng, c.mixup_alpha)
        x = np.concatenate([a for a in (xs, xw, xu) if len(a)])
        bands = (c.filter_bands_min, c.filter_bands_max)
        gain = (-c.filter_gain_db, c.filter_gain_db)
        x_s = np.stack([filter_augment(v, rng, bands, gain) for v in x])
        x_t = np.stack([filter_augment(v, rng, bands, gain) for v in x])
        x_s, x_t = instance_standardize(x_s), instance_standardize(x_t)
        if c.time_mask_frames > 0:
            for i in range(len(x)):
                length = int(rng.integers(0, c.time_mask_frames + 1))
                start = int(rng.integers(0, x.shape[-1] - length + 1))
                x_s[i], _ = time_mask(x_s[i], None, c.time_mask_frames, start=start, length=length)
                x_t[i], _ = time_mask(x_t[i], None, c.time_mask_frames, start=start, length=length)
                if i < len(ys):
                    ys[i] = time_mask(ys[i], None, c.time_mask_frames, start=start, length=length)[0]
        return x_s, x_t, pool_labels(ys, tp), yw

    def train_step(self, xs, ys, xw, yw, xu, epoch: int) -> LossTerms:
        rng = _stream(self.seed, 11, self.step)
        x_s, x_t, ys_p, yw = self._augment(xs, ys, xw, yw, xu, rng)
        dt = self.dtype
        self.student.train()
        self.teacher.train()
        self.student.set_dropout_state(self.seed, self.step)
        self.teacher.set_dropout_state(self.seed + 1, self.step)
        student_pred = self.student(Tensor(x_s[:, None].astype(dt), dtype=dt))
        with no_grad():
            teacher_pred = self.teacher(Tensor(x_t[:, None].astype(dt), dtype=dt))
        ys_p = ys_p[..., : student_pred.strong.shape[-1]]
        terms = total_loss(student_pred, teacher_pred, ys_p, yw, len(xs), len(xw), self.cfg.loss_weights(),
                           epoch, self.cfg.consistency_stopgrad)
        self.opt.zero_grad()
        terms.total.backward()
        self.opt.step()
        ema_update(self.teacher, self.student, self.cfg.ema_decay)
        self.step += 1
        return terms

    def steps_per_epoch(self, data: TrainData) -> int:
        c = self.cfg
        counts = []
        for n, b in ((len(data.strong_x), c.batch_strong), (len(data.weak_x), c.batch_weak),
                     (len(data.unlabeled_x), c.batch_unlabeled)):
            if n and b:
                counts.append(math.ceil(n / b))
        if not counts:
            raise ValueError("no training clips")
        return max(counts)

    def fit(self, data: TrainData, epochs: int = None, on_epoch: Callable[[EpochLog], None] = None) -> List[EpochLog]:
        c = self.cfg
        epochs = c.epochs if epochs is None else epochs
        cyc_s = _Cycler(len(data.strong_x), self.seed, 1)
        cyc_w = _Cycler(len(data.weak_x), self.seed, 2)
        cyc_u = _Cycler(len(data.unlabeled_x), self.seed, 3)
        n_steps = self.steps_per_epoch(data)
        for epoch in range(len(self.history), len(self.history) + epochs):
            t0 = time.time()
            sums = np.zeros(4)
            for _ in range(n_steps):
                i_s = cyc_s.take(min(c.batch_strong, len(data.strong_x)))
                i_w = cyc_w.take(min(c.batch_weak, len(data.weak_x)))
                i_u = cyc_u.take(min(c.batch_unlabeled, len(data.unlabeled_x)))
                terms = self.train_step(
                    data.strong_x[i_s], data.strong_y[i_s], data.weak_x[i_w], data.weak_y[i_w],
                    data.unlabeled_x[i_u], epoch,
                )
                sums += [terms.total.item(), terms.strong.item(), terms.weak.item(), terms.consistency.item()]
            sums /= n_steps
            val = validation_psds1(self.student, data, c)
            rec = EpochLog(epoch + 1, *sums.tolist(), val)
            self.history.append(rec)
            logger.info("epoch %d loss %.4f val_psds1 %.4f (%.1fs)", rec.epoch, rec.loss, val, time.time() - t0)
            if on_epoch:
                on_epoch(rec)
        return self.history

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {f"student.{k}": v for k, v in self.student.state_dict().items()}
        out.update({f"teacher.{k}": v for k, v in self.teacher.state_dict().items()})
        return out


def train_loop(data: TrainData, model_cfg: ModelConfig, cfg: TrainConfig, seed: int = 0,
               on_epoch: Callable[[EpochLog], None] = None) -> Trainer:
    trainer = Trainer(model_cfg, cfg, seed)
    trainer.fit(data, on_epoch=on_epoch)
    return trainer
