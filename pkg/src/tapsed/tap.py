"""Temporal attention pooling (TAP) and plain temporal average pooling.

TAP collapses the time axis of a (B, C, F, T) feature map into a (B, C, F)
context by summing three terms:

* time attention: softmax-over-time weights from the input, applied to a
  sigmoid-gated salient copy of the input,
* velocity attention: the same, but with weights computed from the
  frame-to-frame difference of the input,
* the plain temporal mean of the raw input.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import ops
from .nn import BatchNorm, Conv2d, Module
from .tensor import Tensor


@dataclass
class TapOutput:
    pooled: Tensor
    alpha: Tensor
    beta: Tensor
    x_salient: Tensor


class ConvBlock(Module):
    """conv -> BN -> ReLU -> 1x1 conv, returning pre-activation logits."""

    def __init__(self, channels: int, kernel: int = 3, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1) if reduction else channels
        self.conv1 = Conv2d(channels, hidden, kernel=(kernel, kernel))
        self.bn = BatchNorm(hidden)
        self.conv2 = Conv2d(hidden, channels, kernel=(1, 1))

    def forward(self, x):
        return self.conv2(ops.relu(self.bn(self.conv1(x))))


def avg_pool_time(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ValueError("avg_pool_time: empty time axis")
    return ops.mean_axis(x, axis=-1)


def salient_representation(x: Tensor, block: ConvBlock) -> Tensor:
    return ops.sigmoid(block(x))


def time_attention(x: Tensor, block: ConvBlock) -> Tensor:
    return ops.softmax_axis(block(x), axis=-1)


def velocity_attention(x: Tensor, block: ConvBlock, use_delta: bool = True) -> Tensor:
    src = ops.time_difference(x) if use_delta else x
    return ops.softmax_axis(block(src), axis=-1)


def attention_sum(weights: Tensor, values: Tensor) -> Tensor:
    """sum_t weights[..., t] * values[..., t]"""
    return ops.sum_axis(ops.mul(weights, values), axis=-1)


class TemporalAttentionPooling(Module):
    """TAP context pooling for a C-channel feature map.

    ``use_ta``, ``use_va`` and ``use_avg`` switch the three terms
    independently; disabling TA and VA leaves plain average pooling.
    ``velocity_input`` selects what the velocity branch sees: ``"delta"``
    (frame differences) or ``"x"`` (raw input).
    """

    def __init__(
        self,
        channels: int,
        kernel: int = 3,
        reduction: int = 4,
        velocity_input: str = "delta",
        use_ta: bool = True,
        use_va: bool = True,
        use_avg: bool = True,
    ):
        super().__init__()
        if velocity_input not in ("delta", "x"):
            raise ValueError(f"velocity_input must be 'delta' or 'x', got {velocity_input!r}")
        self.channels = channels
        self.velocity_input = velocity_input
        self.use_ta = use_ta
        self.use_va = use_va
        self.use_avg = use_avg
        self.saliency = ConvBlock(channels, kernel, reduction)
        self.time_att = ConvBlock(channels, kernel, reduction)
        self.vel_att = ConvBlock(channels, kernel, reduction)

    def forward_full(self, x: Tensor) -> TapOutput:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"TAP expects (B, {self.channels}, F, T), got {x.shape}")
        x_s = salient_representation(x, self.saliency)
        alpha = time_attention(x, self.time_att)
        beta = velocity_attention(x, self.vel_att, self.velocity_input == "delta")
        terms = []
        if self.use_ta:
            terms.append(attention_sum(alpha, x_s))
        if self.use_va:
            terms.append(attention_sum(beta, x_s))
        if self.use_avg:
            terms.append(avg_pool_time(x))
        if not terms:
            raise ValueError("TAP needs at least one active term")
        pooled = terms[0]
        for t in terms[1:]:
            pooled = ops.add(pooled, t)
        return TapOutput(pooled, alpha, beta, x_s)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_full(x).pooled


def tap_pool(x: Tensor, params: TemporalAttentionPooling) -> TapOutput:
    return params.forward_full(x)

