"""Slow, loop-based reference implementations used only by the tests.

None of these share code with the package beyond plain data containers.
"""

from __future__ import annotations

import math
from typing import Dict, List, Sequence

import numpy as np

# studentized range q_{0.05}(k, df), from standard published tables
Q05_TABLE = {
    (3, 5): 4.602,
    (3, 10): 3.877,
    (3, 12): 3.773,
    (3, 20): 3.578,
    (3, 60): 3.399,
    (4, 20): 3.958,
    (5, 20): 4.232,
}


def conv2d_loop(x, w, b=None, dilation=1):
    """Direct same-padded cross-correlation, dilation on the frequency axis."""
    B, C, F, T = x.shape
    O, _, kF, kT = w.shape
    out = np.zeros((B, O, F, T))
    cf, ct = kF // 2, kT // 2
    for n in range(B):
        for o in range(O):
            for f in range(F):
                for t in range(T):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for i in range(kF):
                            for j in range(kT):
                                ff = f + (i - cf) * dilation
                                tt = t + j - ct
                                if 0 <= ff < F and 0 <= tt < T:
                                    acc += w[o, c, i, j] * x[n, c, ff, tt]
                    out[n, o, f, t] = acc
    return out


def batch_norm_train_loop(x, gamma, beta, eps=1e-5):
    B, C, F, T = x.shape
    out = np.empty_like(x, dtype=float)
    for c in range(C):
        vals = x[:, c].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        out[:, c] = (x[:, c] - mu) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def conv_block_loop(x, block):
    """conv -> BN(train) -> ReLU -> 1x1 conv, using the block's raw arrays."""
    h = conv2d_loop(x, block.conv1.weight.data, block.conv1.bias.data)
    h = batch_norm_train_loop(h, block.bn.gamma.data, block.bn.beta.data)
    h = np.maximum(h, 0.0)
    return conv2d_loop(h, block.conv2.weight.data, block.conv2.bias.data)


def softmax_time_loop(z):
    out = np.empty_like(z)
    B, C, F, T = z.shape
    for b in range(B):
        for c in range(C):
            for f in range(F):
                m = max(z[b, c, f])
                e = [math.exp(v - m) for v in z[b, c, f]]
                s = sum(e)
                out[b, c, f] = [v / s for v in e]
    return out


def tap_loop(x, tap, use_delta=True):
    """Three-term TAP pooling computed with explicit loops."""
    B, C, F, T = x.shape
    s_logits = conv_block_loop(x, tap.saliency)
    x_s = 1.0 / (1.0 + np.exp(-s_logits))
    alpha = softmax_time_loop(conv_block_loop(x, tap.time_att))
    dx = np.zeros_like(x)
    for t in range(1, T):
        dx[..., t] = x[..., t] - x[..., t - 1]
    beta = softmax_time_loop(conv_block_loop(dx if use_delta else x, tap.vel_att))
    pooled = np.zeros((B, C, F))
    for b in range(B):
        for c in range(C):
            for f in range(F):
                ta = sum(alpha[b, c, f, t] * x_s[b, c, f, t] for t in range(T))
                va = sum(beta[b, c, f, t] * x_s[b, c, f, t] for t in range(T))
                avg = sum(x[b, c, f, t] for t in range(T)) / T
                pooled[b, c, f] = ta + va + avg
    return pooled, alpha, beta, x_s


def fdy_assembled_loop(x, weights, biases, dilations, attention):
    """Per-frequency assembled-kernel oracle.

    For every batch item and output row f, all basis kernels are placed on
    a common frequency-offset grid (offset = (i - 1) * dilation), weighted
    by attention[b, k, f] and summed into one kernel, which is then applied
    at row f only.
    """
    B, C, F, T = x.shape
    O = weights[0].shape[0]
    out = np.zeros((B, O, F, T))
    for b in range(B):
        for f in range(F):
            kernel: Dict[tuple, np.ndarray] = {}
            bias = np.zeros(O)
            for k, (w, bk, d) in enumerate(zip(weights, biases, dilations)):
                a = attention[b, k, f]
                bias += a * bk
                for i in range(w.shape[2]):
                    for j in range(w.shape[3]):
                        key = ((i - w.shape[2] // 2) * d, j - w.shape[3] // 2)
                        kernel[key] = kernel.get(key, 0.0) + a * w[:, :, i, j]
            for t in range(T):
                acc = bias.copy()
                for (df, dt), wk in kernel.items():
                    ff, tt = f + df, t + dt
                    if 0 <= ff < F and 0 <= tt < T:
                        acc += wk @ x[b, :, ff, tt]
                out[b, :, f, t] = acc
    return out


def median_loop(track, length):
    """Sliding median with symmetric (edge-including) reflection."""
    n = len(track)
    half = length // 2
    out = []
    for i in range(n):
        win = []
        for j in range(i - half, i + half + 1):
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            win.append(track[j])
        win.sort()
        out.append(win[half])
    return np.array(out, dtype=float)


def psds_bruteforce(dets_per_thr, truth, classes, dtc, gtc, alpha_st, e_max, duration_hours):
    """Intersection-based PSDS with explicit pair enumeration and piecewise integration."""
    C = len(classes)
    J = len(dets_per_thr)
    tp = np.zeros((C, J))
    fp = np.zeros((C, J))
    n_gt = np.zeros(C)
    for ci, cls in enumerate(classes):
        for clip, evs in truth.items():
            n_gt[ci] += sum(1 for e in evs if e.label == cls)
    for j, dets in enumerate(dets_per_thr):
        for ci, cls in enumerate(classes):
            for clip in set(truth) | set(dets):
                g = [e for e in truth.get(clip, []) if e.label == cls]
                d = [e for e in dets.get(clip, []) if e.label == cls]
                accepted = []
                for de in d:
                    inter = 0.0
                    for ge in g:
                        inter += max(0.0, min(de.offset, ge.offset) - max(de.onset, ge.onset))
                    if inter / (de.offset - de.onset) >= dtc:
                        accepted.append(de)
                    else:
                        fp[ci, j] += 1
                for ge in g:
                    cov = 0.0
                    for de in accepted:
                        cov += max(0.0, min(de.offset, ge.offset) - max(de.onset, ge.onset))
                    if cov / (ge.offset - ge.onset) >= gtc:
                        tp[ci, j] += 1
    keep = [ci for ci in range(C) if n_gt[ci] > 0]
    tpr = {ci: tp[ci] / n_gt[ci] for ci in keep}
    fpr = {ci: fp[ci] / duration_hours for ci in keep}

    def curve(ci, e):
        best = 0.0
        for j in range(J):
            if fpr[ci][j] <= e:
                best = max(best, tpr[ci][j])
        return best

    points = sorted({0.0, e_max} | {float(v) for ci in keep for v in fpr[ci] if v <= e_max})
    area = 0.0
    for lo, hi in zip(points[:-1], points[1:]):
        # the step curve is constant on [lo, hi)
        vals = [curve(ci, lo) for ci in keep]
        mean = sum(vals) / len(vals)
        std = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
        area += max(0.0, mean - alpha_st * std) * (hi - lo)
    return area / e_max


def anova_textbook(groups):
    """F statistic from the between/within mean squares."""
    k = len(groups)
    n = sum(len(g) for g in groups)
    grand = sum(sum(g) for g in groups) / n
    ssb = 0.0
    ssw = 0.0
    for g in groups:
        m = sum(g) / len(g)
        ssb += len(g) * (m - grand) ** 2
        ssw += sum((v - m) ** 2 for v in g)
    return (ssb / (k - 1)) / (ssw / (n - k)), k - 1, n - k


def tukey_table_significance(groups, alpha_table=Q05_TABLE):
    """Pairwise significance by comparing |mean_i - mean_j| with the tabled critical difference."""
    k = len(groups)
    n = sum(len(g) for g in groups)
    df = n - k
    q = alpha_table[(k, df)]
    means = [sum(g) / len(g) for g in groups]
    ssw = sum(sum((v - m) ** 2 for v in g) for g, m in zip(groups, means))
    msw = ssw / df
    sig = np.zeros((k, k), dtype=bool)
    for i in range(k):
        for j in range(k):
            if i != j:
                hsd = q * math.sqrt(msw / 2 * (1 / len(groups[i]) + 1 / len(groups[j])))
                sig[i, j] = abs(means[i] - means[j]) > hsd
    return sig


def bce_loop(p, y, eps=1e-7):
    p = np.clip(np.asarray(p, dtype=float).ravel(), eps, 1 - eps)
    y = np.asarray(y, dtype=float).ravel()
    return -sum(yy * math.log(pp) + (1 - yy) * math.log(1 - pp) for pp, yy in zip(p, y)) / len(p)


def mse_loop(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def random_psds_instance(rng, grid=0.5, clip_seconds=10.0):
    """Tiny random PSDS problem: <=3 classes, <=4 true events, <=5 operating points."""
    from tapsed.evaluation import EventInterval

    n_classes = int(rng.integers(1, 4))
    classes = [f"c{i}" for i in range(n_classes)]
    clips = [f"clip{i}" for i in range(int(rng.integers(1, 3)))]
    slots = int(clip_seconds / grid)

    def event():
        a, b = sorted(rng.choice(slots + 1, size=2, replace=False))
        return EventInterval(classes[int(rng.integers(n_classes))], a * grid, b * grid)

    truth = {c: [] for c in clips}
    for _ in range(int(rng.integers(1, 5))):
        truth[clips[int(rng.integers(len(clips)))]].append(event())
    dets = []
    for _ in range(int(rng.integers(1, 6))):
        per = {}
        for c in clips:
            per[c] = [event() for _ in range(int(rng.integers(0, 4)))]
            if rng.random() < 0.5:
                per[c] += list(truth[c])
        dets.append(per)
    return classes, truth, dets
