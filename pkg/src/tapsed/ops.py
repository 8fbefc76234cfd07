"""Differentiable operations over :class:`~tapsed.tensor.Tensor`.

Each op computes its forward result with numpy and registers a backward
closure returning one gradient per parent (``None`` where a parent needs
none). Reductions accumulate in float64 and cast back.
"""

from __future__ import annotations

import zlib
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .tensor import Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _acc_sum(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype, copy=False)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _wrap(a, b)
    b = _wrap(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * x.data.dtype.type(c)

    def backward(g):
        return (g * g.dtype.type(c),)

    return Tensor._from_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), backward)


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    return special.expit(v)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def backward(g):
        return (g * s * (1 - s),)

    return Tensor._from_op(s, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1 - t * t),)

    return Tensor._from_op(t, (x,), backward)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def backward(g):
        return (g * e,)

    return Tensor._from_op(e, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return Tensor._from_op(out, (x,), backward)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def backward(g):
        return (2 * g * x.data,)

    return Tensor._from_op(out, (x,), backward)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data >= lo
    out = np.where(mask, x.data, lo).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = _acc_sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), backward)


def mean_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.asarray(_acc_sum(x.data, axis=axes, keepdims=keepdims) / x.dtype.type(n))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / g.dtype.type(n), x.shape).copy(),)

    return Tensor._from_op(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def backward(g):
        return (g.transpose(inv),)

    return Tensor._from_op(out, (x,), backward)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if isinstance(out, np.ndarray) and np.shares_memory(out, x.data):
        out = out.copy()

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.asarray(out), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        grads = []
        for i, t in enumerate(tensors):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)] if t.requires_grad else None)
        return tuple(grads)

    return Tensor._from_op(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) if t.requires_grad else None for i, t in enumerate(tensors))

    return Tensor._from_op(out, tensors, backward)


def time_difference(x: Tensor) -> Tensor:
    """Frame-to-frame difference along the last axis; the first frame is zero."""
    d = np.zeros_like(x.data)
    d[..., 1:] = x.data[..., 1:] - x.data[..., :-1]

    def backward(g):
        gi = np.zeros_like(g)
        gi[..., 1:] += g[..., 1:]
        gi[..., :-1] -= g[..., 1:]
        return (gi,)

    return Tensor._from_op(d, (x,), backward)


# ---------------------------------------------------------------------------
# softmax / linear / pooling
# ---------------------------------------------------------------------------

def softmax_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for {x.ndim}-d tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = (e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype, copy=False)

    def backward(g):
        dot = _acc_sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor._from_op(y, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = _acc_sum(g2, axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._from_op(out, parents, backward)


def avg_pool2d(x: Tensor, kernel) -> Tensor:
    """Non-overlapping average pool over the last two axes (floor mode)."""
    kf, kt = kernel
    b, c, f, t = x.shape
    fo, to = f // kf, t // kt
    if fo == 0 or to == 0:
        raise ValueError(f"avg_pool2d: kernel {kernel} larger than input {x.shape[2:]}")
    view = x.data[:, :, : fo * kf, : to * kt].reshape(b, c, fo, kf, to, kt)
    out = view.mean(axis=(3, 5), dtype=np.float64).astype(x.dtype, copy=False)

    def backward(g):
        gi = np.zeros_like(x.data)
        rep = np.broadcast_to(g[:, :, :, None, :, None] / g.dtype.type(kf * kt), (b, c, fo, kf, to, kt))
        gi[:, :, : fo * kf, : to * kt] = rep.reshape(b, c, fo * kf, to * kt)
        return (gi,)

    return Tensor._from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

_IM2COL_BYTES = 256 * 2 ** 20


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, freq_dilation: int = 1) -> Tensor:
    """Same-padded 2-D cross-correlation over (freq, time), stride 1.

    ``x`` is (B, Cin, F, T), ``weight`` (Cout, Cin, kF, kT) with odd kernel
    extents. Dilation applies to the frequency axis only; padding is zero.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    B, C, F, T = x.shape
    O, Cw, kF, kT = weight.shape
    if Cw != C:
        raise ValueError(f"conv2d: input has {C} channels but weight expects {Cw}")
    if kF % 2 == 0 or kT % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {(kF, kT)}")
    d = int(freq_dilation)
    if d < 1:
        raise ValueError(f"conv2d: freq_dilation must be >= 1, got {freq_dilation}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({O},)")
    pf, pt = d * (kF - 1) // 2, (kT - 1) // 2
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pf, pf), (pt, pt))) if (pf or pt) else xd
    w = weight.data
    FT = F * T
    taps = [(i, j) for i in range(kF) for j in range(kT)]
    K = len(taps)

    def tap_view(i, j):
        return xp[:, :, i * d: i * d + F, j: j + T]

    # gather all taps at once (im2col) unless the buffer would be large
    use_cols = B * C * K * FT * xd.itemsize <= _IM2COL_BYTES
    if use_cols:
        cols = np.empty((B, C, K, F, T), dtype=xd.dtype)
        for k, (i, j) in enumerate(taps):
            cols[:, :, k] = tap_view(i, j)
        cols = cols.reshape(B, C * K, FT)
        out = np.matmul(w.reshape(O, C * K), cols)
    else:
        out = np.zeros((B, O, FT), dtype=xd.dtype)
        for i, j in taps:
            out += np.matmul(w[:, :, i, j], np.ascontiguousarray(tap_view(i, j)).reshape(B, C, FT))
    out = out.reshape(B, O, F, T)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(B, O, FT)
        gw = gxp = None
        if use_cols:
            if weight.requires_grad:
                gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
            if x.requires_grad:
                gcols = np.matmul(w.reshape(O, C * K).T, g3).reshape(B, C, K, F, T)
                gxp = np.zeros_like(xp)
                for k, (i, j) in enumerate(taps):
                    gxp[:, :, i * d: i * d + F, j: j + T] += gcols[:, :, k]
        else:
            gw = np.zeros_like(w) if weight.requires_grad else None
            gxp = np.zeros_like(xp) if x.requires_grad else None
            for i, j in taps:
                if gw is not None:
                    xs = np.ascontiguousarray(tap_view(i, j)).reshape(B, C, FT)
                    gw[:, :, i, j] = np.tensordot(g3, xs, axes=([0, 2], [0, 2]))
                if gxp is not None:
                    gxp[:, :, i * d: i * d + F, j: j + T] += np.matmul(w[:, :, i, j].T, g3).reshape(B, C, F, T)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pf: pf + F, pt: pt + T] if (pf or pt) else gxp
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        gb = _acc_sum(g, axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._from_op(out, parents, backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a (B, C, F, T) tensor.

    Train mode uses batch statistics over (B, F, T) and updates the running
    buffers in place (unbiased variance, as is conventional); eval mode uses
    the running buffers.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d expects (B, C, F, T), got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm2d: affine params must have length {C}")
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n == 0:
        raise ValueError("batch_norm2d: empty batch")
    axes = (0, 2, 3)
    xd = x.data
    if training:
        mean64 = np.mean(xd, axis=axes, dtype=np.float64)
        var64 = np.mean((xd - mean64[None, :, None, None].astype(xd.dtype)) ** 2, axis=axes, dtype=np.float64)
        if running_mean is not None:
            unbiased = var64 * n / max(n - 1, 1)
            running_mean *= 1 - momentum
            running_mean += momentum * mean64
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None:
            raise ValueError("batch_norm2d: eval mode needs running statistics")
        mean64 = np.asarray(running_mean, dtype=np.float64)
        var64 = np.asarray(running_var, dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var64 + eps)).astype(xd.dtype)
    mean = mean64.astype(xd.dtype)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = _acc_sum(g * xhat, axis=axes) if gamma.requires_grad else None
        gb = _acc_sum(g, axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                m1 = _acc_sum(gxhat, axis=axes, keepdims=True) / xd.dtype.type(n)
                m2 = _acc_sum(gxhat * xhat, axis=axes, keepdims=True) / xd.dtype.type(n)
                gx = (gxhat - m1 - xhat * m2) * inv_std[None, :, None, None]
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout_rng(seed: int, name: str, step: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, layer name, step)."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8")), int(step) & 0xFFFFFFFF]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return Tensor._from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# recurrent
# ---------------------------------------------------------------------------

def gru_direction(
    x: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    reverse: bool = False,
) -> Tensor:
    """One direction of a GRU layer over (B, T, D) with zero initial state.

    Gate layout (reset, update, new) and the two bias vectors follow the
    common cuDNN-compatible convention, with the reset gate applied to the
    hidden projection including its bias.
    """
    if x.ndim != 3:
        raise ValueError(f"gru expects (B, T, D), got {x.shape}")
    B, T, D = x.shape
    H = w_hh.shape[1]
    if w_ih.shape != (3 * H, D) or w_hh.shape != (3 * H, H):
        raise ValueError(f"gru: weight shapes {w_ih.shape}, {w_hh.shape} do not match D={D}, H={H}")
    if T < 1:
        raise ValueError("gru: sequence length must be >= 1")
    dt = x.dtype
    gi_all = x.data @ w_ih.data.T + b_ih.data  # (B, T, 3H)
    Whh = w_hh.data
    bhh = b_hh.data
    steps = range(T - 1, -1, -1) if reverse else range(T)
    hs = np.zeros((B, T, H), dtype=dt)
    cache = [None] * T
    h = np.zeros((B, H), dtype=dt)
    for t in steps:
        gi = gi_all[:, t]
        gh = h @ Whh.T + bhh
        r = _sigmoid_np(gi[:, :H] + gh[:, :H])
        z = _sigmoid_np(gi[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gi[:, 2 * H:] + r * gh[:, 2 * H:])
        h_new = (1 - z) * n + z * h
        cache[t] = (h, r, z, n, gh[:, 2 * H:])
        hs[:, t] = h_new
        h = h_new

    def backward(g):
        dgi_all = np.zeros((B, T, 3 * H), dtype=dt)
        dWhh = np.zeros_like(Whh)
        dbhh = np.zeros(3 * H, dtype=np.float64)
        carry = np.zeros((B, H), dtype=dt)
        order = range(T) if reverse else range(T - 1, -1, -1)
        for t in order:
            h_prev, r, z, n, ghn = cache[t]
            dh = g[:, t] + carry
            dn = dh * (1 - z)
            dz = dh * (h_prev - n)
            dn_pre = dn * (1 - n * n)
            dr = dn_pre * ghn
            dr_pre = dr * r * (1 - r)
            dz_pre = dz * z * (1 - z)
            dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
            dgi_all[:, t] = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
            dWhh += dgh.T @ h_prev
            dbhh += dgh.sum(axis=0, dtype=np.float64)
            carry = dh * z + dgh @ Whh
        dgi2 = dgi_all.reshape(B * T, 3 * H)
        dx = (dgi_all @ w_ih.data) if x.requires_grad else None
        dWih = dgi2.T @ x.data.reshape(B * T, D)
        dbih = _acc_sum(dgi2, axis=0)
        return dx, dWih, dWhh, dbih, dbhh.astype(dt)

    return Tensor._from_op(hs, (x, w_ih, w_hh, b_ih, b_hh), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def binary_cross_entropy(pred: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy; ``target`` is a constant array."""
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ValueError(f"bce: target shape {y.shape} != prediction shape {pred.shape}")
    p = np.clip(pred.data, eps, 1 - eps)
    n = pred.size
    val = -_acc_sum(y * np.log(p) + (1 - y) * np.log1p(-p)) / pred.dtype.type(n)

    def backward(g):
        inside = (pred.data > eps) & (pred.data < 1 - eps)
        return (g * inside * (p - y) / (p * (1 - p)) / pred.dtype.type(n),)

    return Tensor._from_op(np.asarray(val), (pred,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = a.size
    val = _acc_sum(diff * diff) / a.dtype.type(n)

    def backward(g):
        k = 2 * g * diff / a.dtype.type(n)
        return (k if a.requires_grad else None, -k if b.requires_grad else None)

    return Tensor._from_op(np.asarray(val), (a, b), backward)
