"""Frequency-dynamic convolution layers (FDY and its DFD/PFD/MDFD/TFD variants).

A dynamic branch owns K basis kernels. A context head pools the input over
time (plain average, or TAP), turns the (B, C, F) context into per-frequency
softmax weights over the K kernels, and the branch output at frequency row
f is the weight-blended sum of the K basis convolutions at that row.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

from . import ops
from .nn import BatchNorm, Conv2d, Module, ModuleList
from .tap import TemporalAttentionPooling, avg_pool_time
from .tensor import Tensor

VARIANTS = ("static", "fdy", "dfd", "pfd", "mdfd", "tfd")


def dilation_tuple_expand(spec: Sequence[int], n_basis: int = 4) -> Tuple[int, ...]:
    """Left-pad a dilation tuple with 1s to ``n_basis`` entries.

    >>> dilation_tuple_expand((2, 3, 3))
    (1, 2, 3, 3)
    """
    spec = tuple(int(d) for d in spec)
    if len(spec) > n_basis:
        raise ValueError(f"dilation tuple {spec} longer than the number of basis kernels ({n_basis})")
    if any(d < 1 for d in spec):
        raise ValueError(f"dilations must be >= 1, got {spec}")
    return (1,) * (n_basis - len(spec)) + spec


_SCHEME_TERM = re.compile(r"^\(([\d,\s]+)\)(?:\s*[x×*]\s*(\d+))?$")


def parse_dilation_scheme(scheme: str) -> List[Tuple[int, ...]]:
    """Parse branch notation such as ``"(1)x3+(2,3,3)"`` into per-branch tuples."""
    out: List[Tuple[int, ...]] = []
    for term in scheme.replace(" ", "").split("+"):
        m = _SCHEME_TERM.match(term)
        if not m:
            raise ValueError(f"bad dilation term {term!r} in {scheme!r}")
        dil = tuple(int(v) for v in m.group(1).split(",") if v)
        out.extend([dil] * int(m.group(2) or 1))
    return out


def format_dilation_scheme(branches: Sequence[Sequence[int]]) -> str:
    terms: List[str] = []
    i = 0
    while i < len(branches):
        j = i
        while j + 1 < len(branches) and tuple(branches[j + 1]) == tuple(branches[i]):
            j += 1
        body = "(" + ",".join(str(d) for d in branches[i]) + ")"
        terms.append(body + (f"x{j - i + 1}" if j > i else ""))
        i = j + 1
    return "+".join(terms)


@dataclass
class DynBranchConfig:
    out_channels: int
    dilations: Tuple[int, ...] = (1, 1, 1, 1)
    attention_temperature: float = 31.0

    @property
    def K(self) -> int:
        return len(self.dilations)

    def validate(self) -> None:
        if self.K < 2:
            raise ValueError(f"a dynamic branch needs K >= 2 basis kernels, got {self.K}")
        if any(d < 1 for d in self.dilations):
            raise ValueError(f"dilations must be >= 1: {self.dilations}")
        if self.out_channels < 1:
            raise ValueError("branch out_channels must be >= 1")
        if self.attention_temperature <= 0:
            raise ValueError("attention temperature must be positive")


@dataclass
class FdyLayerConfig:
    variant: str
    in_channels: int
    out_channels: int
    static_channels: int
    branches: List[DynBranchConfig] = field(default_factory=list)
    context_pooling: str = "average"

    @property
    def static_proportion(self) -> float:
        return self.static_channels / self.out_channels

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.context_pooling not in ("average", "tap"):
            raise ValueError(f"context_pooling must be 'average' or 'tap', got {self.context_pooling!r}")
        total = self.static_channels + sum(b.out_channels for b in self.branches)
        if total != self.out_channels:
            raise ValueError(
                f"channel split mismatch: static {self.static_channels} + branches "
                f"{[b.out_channels for b in self.branches]} != {self.out_channels}"
            )
        if self.static_channels < 0:
            raise ValueError("static channel count is negative")
        for b in self.branches:
            b.validate()
        if self.variant == "static" and self.branches:
            raise ValueError("a static layer cannot have dynamic branches")
        if self.variant != "static" and not self.branches:
            raise ValueError(f"variant {self.variant!r} needs at least one dynamic branch")
        if self.variant == "tfd" and self.context_pooling != "tap":
            raise ValueError("the tfd variant uses TAP context pooling")
        if self.variant == "fdy":
            b = self.branches
            if len(b) != 1 or self.static_channels or any(d != 1 for d in b[0].dilations):
                raise ValueError("fdy is a single undilated branch with no static part")


class KernelAttention(Module):
    """Per-frequency softmax over K basis kernels from a (B, C, F) context.

    With ``reduction`` set, the head is conv(k=3 over F, C->C/reduction,
    no bias) -> BN -> ReLU -> conv(1, ->K); with ``reduction=None`` it is a
    single conv(k=3 over F, C->K).
    """

    def __init__(self, in_channels: int, n_basis: int, temperature: float = 31.0, reduction=4, kernel: int = 3):
        super().__init__()
        self.temperature = float(temperature)
        self.n_basis = n_basis
        if reduction:
            hidden = max(in_channels // reduction, 4)
            self.conv1 = Conv2d(in_channels, hidden, kernel=(kernel, 1), bias=False)
            self.bn = BatchNorm(hidden)
            self.conv2 = Conv2d(hidden, n_basis, kernel=(1, 1))
        else:
            self.conv1 = Conv2d(in_channels, n_basis, kernel=(kernel, 1))
            self.bn = None
            self.conv2 = None

    def logits(self, context: Tensor) -> Tensor:
        B, C, F = context.shape
        h = self.conv1(ops.reshape(context, (B, C, F, 1)))
        if self.conv2 is not None:
            h = self.conv2(ops.relu(self.bn(h)))
        return ops.reshape(h, (B, self.n_basis, F))

    def forward(self, context: Tensor) -> Tensor:
        return kernel_attention_from_logits(self.logits(context), self.temperature)


def kernel_attention_from_logits(logits: Tensor, temperature: float) -> Tensor:
    return ops.softmax_axis(ops.scale(logits, 1.0 / temperature), axis=1)


def kernel_attention(context: Tensor, head: KernelAttention, temperature: float = None) -> Tensor:
    """Attention over basis kernels, shape (B, K, F); sums to one over K."""
    t = head.temperature if temperature is None else temperature
    return kernel_attention_from_logits(head.logits(context), t)


def fdy_forward(
    x: Tensor,
    weights: Sequence[Tensor],
    biases: Sequence[Tensor],
    dilations: Sequence[int],
    attention: Tensor,
) -> Tensor:
    """Blend K basis convolutions per frequency row with ``attention`` (B, K, F).

    Basis kernels sharing a dilation are evaluated in one convolution.
    """
    K = len(weights)
    if attention.shape[1] != K or len(dilations) != K or len(biases) != K:
        raise ValueError(f"fdy_forward: {K} kernels but attention {attention.shape}, dilations {dilations}")
    B, _, F, T = x.shape
    O = weights[0].shape[0]
    per_kernel: List[Tensor] = [None] * K
    groups = {}
    for k, d in enumerate(dilations):
        groups.setdefault(int(d), []).append(k)
    for d, ks in groups.items():
        if len(ks) == 1:
            k = ks[0]
            per_kernel[k] = ops.conv2d(x, weights[k], biases[k], freq_dilation=d)
            continue
        w = ops.concat([weights[k] for k in ks], axis=0)
        b = ops.concat([biases[k] for k in ks], axis=0)
        y = ops.conv2d(x, w, b, freq_dilation=d)
        y = ops.reshape(y, (B, len(ks), O, F, T))
        for i, k in enumerate(ks):
            per_kernel[k] = y[:, i]
    stacked = ops.stack(per_kernel, axis=1)  # (B, K, O, F, T)
    att = ops.reshape(attention, (B, K, 1, F, 1))
    return ops.sum_axis(ops.mul(stacked, att), axis=1)


class DynamicBranch(Module):
    """K basis kernels + context pooling + kernel-attention head."""

    def __init__(
        self,
        in_channels: int,
        cfg: DynBranchConfig,
        context_pooling: str = "average",
        att_reduction=4,
        tap_kernel: int = 3,
        tap_reduction: int = 4,
        tap_velocity_input: str = "delta",
    ):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dilations = tuple(cfg.dilations)
        self.basis = ModuleList(
            Conv2d(in_channels, cfg.out_channels, kernel=(3, 3), freq_dilation=d) for d in self.dilations
        )
        self.attention = KernelAttention(in_channels, cfg.K, cfg.attention_temperature, reduction=att_reduction)
        self.tap = (
            TemporalAttentionPooling(in_channels, tap_kernel, tap_reduction, tap_velocity_input)
            if context_pooling == "tap" else None
        )

    def context(self, x: Tensor) -> Tensor:
        return self.tap(x) if self.tap is not None else avg_pool_time(x)

    def forward(self, x: Tensor) -> Tensor:
        att = self.attention(self.context(x))
        return fdy_forward(
            x, [c.weight for c in self.basis], [c.bias for c in self.basis], self.dilations, att
        )


class FreqDynamicConv2d(Module):
    """Static 3x3 branch and/or dynamic branches, concatenated over channels."""

    def __init__(self, cfg: FdyLayerConfig, att_reduction=4, tap_kernel=3, tap_reduction=4,
                 tap_velocity_input="delta"):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.static = Conv2d(cfg.in_channels, cfg.static_channels) if cfg.static_channels else None
        self.branches = ModuleList(
            DynamicBranch(cfg.in_channels, b, cfg.context_pooling, att_reduction,
                          tap_kernel, tap_reduction, tap_velocity_input)
            for b in cfg.branches
        )

    def forward(self, x: Tensor) -> Tensor:
        outs = []
        if self.static is not None:
            outs.append(self.static(x))
        outs.extend(b(x) for b in self.branches)
        return ops.concat(outs, axis=1)


def pfd_forward(x: Tensor, layer: FreqDynamicConv2d) -> Tensor:
    if len(layer.branches) > 1:
        raise ValueError("pfd layers have a single dynamic branch")
    return layer(x)


def mdfd_forward(x: Tensor, layer: FreqDynamicConv2d) -> Tensor:
    return layer(x)


def split_channels(out_channels: int, static_proportion) -> Tuple[int, int]:
    """Split ``out_channels`` into (static, dynamic); the split must be integral."""
    s = static_proportion * out_channels
    if abs(s - round(s)) > 1e-9:
        raise ValueError(f"static proportion {static_proportion} of {out_channels} channels is not integral")
    s = int(round(s))
    return s, out_channels - s
