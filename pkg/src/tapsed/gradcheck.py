"""Central finite-difference checks of every differentiable op and of composed modules.

Each suite builds a small random problem from a seed, reduces the output
to a scalar with a fixed random projection, and compares the analytic
gradient of every leaf with central differences (float64, step 1e-5) on a
random subset of coordinates. The error of a leaf is
``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, 1e-4)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import ops
from .dynamic import DynamicBranch, DynBranchConfig, FdyLayerConfig, FreqDynamicConv2d, KernelAttention, fdy_forward
from .model import ModelConfig, build_model
from .nn import BatchNorm, BiGRU, Module
from .tap import TemporalAttentionPooling
from .tensor import Tensor, get_default_dtype, no_grad, set_default_dtype

STEP = 1e-5
# gradients that vanish identically (a bias feeding batch norm, a constant
# shift under a softmax) are compared against this floor instead of noise
ABS_FLOOR = 1e-4
Problem = Tuple[List[Tensor], Callable[[], Tensor]]


@dataclass
class SuiteResult:
    name: str
    tolerance: float
    seeds: int
    max_error: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tolerance)


def _leaf(rng, shape, lo=None) -> Tensor:
    x = rng.standard_normal(shape)
    if lo is not None:
        x = np.where(x >= 0, x + lo, x - lo)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _module_problem(module: Module, x: Tensor, call=None) -> Problem:
    module.finalize(0)
    for p in module.parameters():
        p.requires_grad = True
    call = call or module
    return [x] + module.parameters(), lambda: call(x)


def _reseed(module: Module, rng) -> None:
    for p in module.parameters():
        p.data = rng.standard_normal(p.shape) * 0.5


def check_problem(leaves: Sequence[Tensor], forward: Callable[[], Tensor], rng: np.random.Generator,
                  max_coords: int = 24, step: float = STEP, verbose: bool = False) -> float:
    """Largest per-leaf relative gradient error."""
    for leaf in leaves:
        leaf.data = np.ascontiguousarray(leaf.data)
    out = forward()
    proj = rng.standard_normal(out.shape)
    for leaf in leaves:
        leaf.grad = None
    ops.sum_axis(ops.mul(out, Tensor(proj, dtype=np.float64))).backward()

    def loss() -> float:
        with no_grad():
            return float(np.sum(forward().data * proj))

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        k = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        a = analytic.reshape(-1)[coords]
        n = np.empty(k)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            up = loss()
            flat[c] = orig - step
            down = loss()
            flat[c] = orig
            n[j] = (up - down) / (2 * step)
        denom = max(np.linalg.norm(a), np.linalg.norm(n), ABS_FLOOR)
        err = float(np.linalg.norm(a - n) / denom)
        if verbose and err > 1e-6:
            print(f"  leaf {getattr(leaf, 'name', '') or leaf.shape}: rel err {err:.2e}")
        worst = max(worst, err)
    return worst


# -- op builders ---------------------------------------------------------------

def _unary(fn, lo=None, positive=False):
    def build(rng):
        x = _leaf(rng, (3, 4), lo)
        if positive:
            x.data = np.abs(x.data) + 0.5
        return [x], lambda: fn(x)
    return build


def _binary(fn, denom=False):
    def build(rng):
        a = _leaf(rng, (3, 4))
        b = _leaf(rng, (4,))
        if denom:
            b.data = np.sign(b.data) * (np.abs(b.data) + 0.5)
        return [a, b], lambda: fn(a, b)
    return build


def _softmax(rng):
    x = _leaf(rng, (2, 3, 5))
    axis = int(rng.integers(0, 3))
    return [x], lambda: ops.softmax_axis(x, axis)


def _reductions(rng):
    x = _leaf(rng, (2, 3, 4))
    return [x], lambda: ops.add(ops.sum_axis(x, axis=1, keepdims=True), ops.mean_axis(x, axis=(0, 2), keepdims=True))


def _shape_ops(rng):
    x = _leaf(rng, (2, 3, 4))
    y = _leaf(rng, (2, 3, 4))
    return [x, y], lambda: ops.concat(
        [ops.transpose(ops.reshape(x, (6, 4)), (1, 0)), ops.reshape(ops.stack([x, y], axis=0)[1, :, :, 1:], (3, 6))],
        axis=0,
    )


def _time_difference(rng):
    x = _leaf(rng, (2, 3, 4, 5))
    return [x], lambda: ops.time_difference(x)


def _linear(rng):
    x, w, b = _leaf(rng, (2, 3, 5)), _leaf(rng, (4, 5)), _leaf(rng, (4,))
    return [x, w, b], lambda: ops.linear(x, w, b)


def _dropout(rng):
    x = _leaf(rng, (3, 6))
    seed = int(rng.integers(1 << 30))
    return [x], lambda: ops.dropout(x, 0.3, True, ops.dropout_rng(seed, "gc", 0))


def _conv(dilation):
    def build(rng):
        x, w, b = _leaf(rng, (2, 3, 5, 7)), _leaf(rng, (4, 3, 3, 3)), _leaf(rng, (4,))
        return [x, w, b], lambda: ops.conv2d(x, w, b, freq_dilation=dilation)
    return build


def _avg_pool(rng):
    x = _leaf(rng, (2, 2, 4, 6))
    return [x], lambda: ops.avg_pool2d(x, (2, 3))


def _batch_norm(training):
    def build(rng):
        x, g, b = _leaf(rng, (2, 3, 4, 5)), _leaf(rng, (3,)), _leaf(rng, (3,))
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
        return [x, g, b], lambda: ops.batch_norm2d(x, g, b, rm.copy(), rv.copy(), training=training)
    return build


def _gru(rng):
    H, D = 5, 4
    x = _leaf(rng, (1, 3, D))
    ws = [_leaf(rng, s) for s in ((3 * H, D), (3 * H, H), (3 * H,), (3 * H,))]
    rev = bool(rng.integers(2))
    return [x] + ws, lambda: ops.gru_direction(x, *ws, reverse=rev)


def _bigru(rng):
    m = BiGRU(4, 5, layers=2)
    leaves, fwd = _module_problem(m, _leaf(rng, (1, 3, 4)))
    _reseed(m, rng)
    return leaves, fwd


def _bce(rng):
    p = Tensor(rng.uniform(0.05, 0.95, (3, 4)), requires_grad=True, dtype=np.float64)
    y = (rng.random((3, 4)) > 0.5).astype(float)
    return [p], lambda: ops.binary_cross_entropy(p, y)


def _mse(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    return [a, b], lambda: ops.mse(a, b)


def _tap(rng):
    m = TemporalAttentionPooling(4, kernel=3, reduction=2)
    leaves, fwd = _module_problem(m, _leaf(rng, (2, 4, 3, 5)))
    _reseed(m, rng)
    return leaves, fwd


def _kernel_attention(rng):
    m = KernelAttention(8, 4, temperature=float(rng.uniform(0.5, 3.0)), reduction=4)
    leaves, fwd = _module_problem(m, _leaf(rng, (2, 8, 5)))
    _reseed(m, rng)
    return leaves, fwd


def _fdy_forward(rng):
    x = _leaf(rng, (2, 2, 6, 4))
    ws = [_leaf(rng, (3, 2, 3, 3)) for _ in range(4)]
    bs = [_leaf(rng, (3,)) for _ in range(4)]
    att = Tensor(rng.dirichlet(np.ones(4), size=(2, 6)).transpose(0, 2, 1), requires_grad=True, dtype=np.float64)
    dil = (1, 1, 2, 3)
    return [x, att] + ws + bs, lambda: fdy_forward(x, ws, bs, dil, att)


def _dynamic_layer(variant, pooling, branches):
    def build(rng):
        cin, cout = 4, 6
        bc = [DynBranchConfig(2, dilation, 1.0) for dilation in branches]
        static = cout - 2 * len(bc)
        if variant == "fdy":
            bc = [DynBranchConfig(cout, (1, 1, 1, 1), 1.0)]
            static = 0
        layer = FreqDynamicConv2d(FdyLayerConfig(variant, cin, cout, static, bc, pooling), tap_reduction=2)
        leaves, fwd = _module_problem(layer, _leaf(rng, (2, cin, 5, 4)))
        _reseed(layer, rng)
        return leaves, fwd
    return build


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        base_channels=(2, 3, 3, 3), variant="pfd", context_pooling="tap", branch_fraction=Fraction(1, 3),
        dilations=((1, 2, 3),), temperature=2.0, pools=((2, 2), (2, 2), (1, 2), (1, 2)), n_mels=16,
        gru_hidden=3, gru_layers=2, n_classes=2, dropout=0.0, att_reduction=4, tap_reduction=2,
    )


def _model(rng):
    m = build_model(tiny_model_config(), int(rng.integers(1 << 30)))
    x = _leaf(rng, (2, 1, 16, 8))
    for p in m.parameters():
        p.requires_grad = True
    _reseed(m, rng)

    def fwd():
        pred = m(x)
        return ops.concat([ops.reshape(pred.strong, (2, -1)), pred.weak], axis=1)

    return [x] + m.parameters(), fwd


POINTWISE = 1e-6
SUITES: Dict[str, Tuple[float, Callable]] = {
    "relu": (POINTWISE, _unary(ops.relu, lo=0.05)),
    "sigmoid": (POINTWISE, _unary(ops.sigmoid)),
    "tanh": (POINTWISE, _unary(ops.tanh)),
    "exp": (POINTWISE, _unary(ops.exp)),
    "log": (POINTWISE, _unary(ops.log, positive=True)),
    "square": (POINTWISE, _unary(ops.square)),
    "scale": (POINTWISE, _unary(lambda x: ops.scale(x, -1.7))),
    "clamp_min": (POINTWISE, _unary(lambda x: ops.clamp_min(x, 0.0), lo=0.05)),
    "add": (POINTWISE, _binary(ops.add)),
    "sub": (POINTWISE, _binary(ops.sub)),
    "mul": (POINTWISE, _binary(ops.mul)),
    "div": (POINTWISE, _binary(ops.div, denom=True)),
    "reductions": (POINTWISE, _reductions),
    "shape_ops": (POINTWISE, _shape_ops),
    "time_difference": (POINTWISE, _time_difference),
    "softmax": (POINTWISE, _softmax),
    "linear": (POINTWISE, _linear),
    "dropout": (POINTWISE, _dropout),
    "conv2d": (1e-6, _conv(1)),
    "conv2d_dilated": (1e-6, _conv(2)),
    "avg_pool2d": (1e-6, _avg_pool),
    "batch_norm_train": (1e-5, _batch_norm(True)),
    "batch_norm_eval": (1e-5, _batch_norm(False)),
    "gru": (1e-5, _gru),
    "bigru": (1e-5, _bigru),
    "bce": (1e-6, _bce),
    "mse": (1e-6, _mse),
    "tap": (1e-4, _tap),
    "kernel_attention": (1e-4, _kernel_attention),
    "fdy_forward": (1e-4, _fdy_forward),
    "fdy_layer": (1e-4, _dynamic_layer("fdy", "average", [])),
    "pfd_layer": (1e-4, _dynamic_layer("pfd", "average", [(1, 1, 1, 1)])),
    "mdfd_layer": (1e-4, _dynamic_layer("mdfd", "average", [(1, 1, 1, 1), (1, 2, 3, 3)])),
    "tfd_layer": (1e-4, _dynamic_layer("tfd", "tap", [(1, 1, 1, 1)])),
    "model": (1e-4, _model),
}


def run_suite(name: str, seeds: int = 20, max_coords: int = 24) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(f"unknown gradcheck suite {name!r}; choose from {', '.join(SUITES)}")
    tol, build = SUITES[name]
    prev = get_default_dtype()
    set_default_dtype("float64")
    try:
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng([seed, 4099])
            leaves, fwd = build(rng)
            coords = max_coords if name != "model" else 4
            worst = max(worst, check_problem(leaves, fwd, rng, coords))
    finally:
        set_default_dtype(prev)
    return SuiteResult(name, tol, seeds, worst)


def run_all(names: Sequence[str] = None, seeds: int = 20) -> List[SuiteResult]:
    return [run_suite(n, seeds) for n in (names or list(SUITES))]
