"""CRNN sound event detector with configurable frequency-dynamic conv layers."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

from . import ops
from .dynamic import (
    DynBranchConfig,
    FdyLayerConfig,
    FreqDynamicConv2d,
    dilation_tuple_expand,
    format_dilation_scheme,
    parse_dilation_scheme,
)
from .nn import BatchNorm, BiGRU, ContextGating, Conv2d, Dropout, Linear, Module, ModuleList
from .tensor import Tensor

BASE_CHANNELS = (32, 64, 128, 256, 256, 256, 256)
DEFAULT_POOLS = ((2, 2), (2, 2), (1, 2), (1, 2), (1, 2), (1, 2), (1, 2))


@dataclass
class ModelConfig:
    """Architecture recipe.

    Channels of layer ``i`` are ``base_channels[i] * width``. Each dynamic
    branch gets ``base_channels[i] * branch_fraction`` output channels and
    the static branch takes the rest. ``pools`` are (time, freq) factors.
    """

    base_channels: Tuple[int, ...] = BASE_CHANNELS
    width: Fraction = Fraction(1)
    variant: str = "static"
    context_pooling: str = "average"
    branch_fraction: Fraction = Fraction(1)
    dilations: Tuple[Tuple[int, ...], ...] = ((1,),)
    n_basis: int = 4
    temperature: float = 31.0
    pools: Tuple[Tuple[int, int], ...] = DEFAULT_POOLS
    n_mels: int = 128
    in_channels: int = 1
    gru_hidden: int = 256
    gru_layers: int = 2
    n_classes: int = 10
    dropout: float = 0.5
    activation: str = "cg"
    att_reduction: int = 4
    tap_kernel: int = 3
    tap_reduction: int = 4
    tap_velocity_input: str = "delta"

    def __post_init__(self):
        self.base_channels = tuple(int(c) for c in self.base_channels)
        self.width = Fraction(self.width)
        self.branch_fraction = Fraction(self.branch_fraction)
        if isinstance(self.dilations, str):
            self.dilations = parse_dilation_scheme(self.dilations)
        self.dilations = tuple(tuple(int(d) for d in b) for b in self.dilations)
        self.pools = tuple(tuple(int(v) for v in p) for p in self.pools)

    @property
    def n_branches(self) -> int:
        return 0 if self.variant == "static" else len(self.dilations)

    @property
    def channels(self) -> Tuple[int, ...]:
        out = []
        for c in self.base_channels:
            v = c * self.width
            if v.denominator != 1:
                raise ValueError(f"width {self.width} gives fractional channel count for {c}")
            out.append(int(v))
        return tuple(out)

    def layer_configs(self) -> List[FdyLayerConfig]:
        chans = self.channels
        cfgs = []
        cin = self.in_channels
        for i, cout in enumerate(chans):
            if i == 0 or self.variant == "static":
                cfgs.append(FdyLayerConfig("static", cin, cout, cout))
            else:
                bc = self.base_channels[i] * self.branch_fraction
                if bc.denominator != 1:
                    raise ValueError(
                        f"branch fraction {self.branch_fraction} of {self.base_channels[i]} channels is not integral"
                    )
                bc = int(bc)
                branches = [
                    DynBranchConfig(bc, dilation_tuple_expand(d, self.n_basis), self.temperature)
                    for d in self.dilations
                ]
                static = cout - bc * len(branches)
                if static < 0:
                    raise ValueError(f"layer {i + 1}: dynamic branches need {bc * len(branches)} > {cout} channels")
                cfgs.append(FdyLayerConfig(self.variant, cin, cout, static, branches, self.context_pooling))
            cin = cout
        for c in cfgs:
            c.validate()
        return cfgs

    def validate(self) -> None:
        if len(self.pools) != len(self.base_channels):
            raise ValueError("one pooling factor pair is needed per conv layer")
        f = self.n_mels
        for _, pf in self.pools:
            f //= pf
        if f != 1:
            raise ValueError(f"frequency axis of {self.n_mels} does not collapse to 1 with pools {self.pools}")
        if self.activation not in ("cg", "relu"):
            raise ValueError(f"activation must be 'cg' or 'relu', got {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.layer_configs()

    @property
    def time_pool(self) -> int:
        return int(np.prod([p[0] for p in self.pools]))

    def to_dict(self) -> Dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dilations":
                out[f.name] = format_dilation_scheme(v)
            elif f.name == "pools":
                out[f.name] = ";".join(f"{a}x{b}" for a, b in v)
            elif isinstance(v, tuple):
                out[f.name] = ",".join(str(x) for x in v)
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_dict(cls, d: Dict[str, str]) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f for f in fields(cls)}
        for key, raw in d.items():
            if key not in types:
                raise KeyError(f"unknown model config key {key!r}")
            raw = str(raw).strip()
            if key == "dilations":
                kwargs[key] = parse_dilation_scheme(raw)
            elif key == "pools":
                kwargs[key] = tuple(tuple(int(v) for v in p.split("x")) for p in raw.split(";"))
            elif key == "base_channels":
                kwargs[key] = tuple(int(v) for v in raw.split(","))
            elif key in ("width", "branch_fraction"):
                kwargs[key] = Fraction(raw)
            elif key == "temperature" or key == "dropout":
                kwargs[key] = float(raw)
            elif key in ("variant", "context_pooling", "activation", "tap_velocity_input"):
                kwargs[key] = raw
            else:
                kwargs[key] = int(raw)
        return cls(**kwargs)


def preset(name: str, **overrides) -> ModelConfig:
    """Named architectures: baseline, fdy, dfd, pfd, tfd, mdfd, tap_pfd, tap_mdfd."""
    name = name.lower()
    if name == "baseline":
        cfg = ModelConfig()
    elif name == "fdy":
        cfg = ModelConfig(variant="fdy")
    elif name == "dfd":
        cfg = ModelConfig(variant="dfd", dilations=((2, 3, 3),))
    elif name == "pfd":
        cfg = ModelConfig(variant="pfd", branch_fraction=Fraction(1, 8))
    elif name == "tfd":
        cfg = ModelConfig(variant="tfd", context_pooling="tap")
    elif name == "mdfd":
        cfg = ModelConfig(
            variant="mdfd", width=Fraction(11, 8), branch_fraction=Fraction(1, 8),
            dilations=parse_dilation_scheme("(1)x5+(2,3)+(2,2,3)+(2,3,3)"),
        )
    elif name == "tap_pfd":
        cfg = ModelConfig(variant="pfd", context_pooling="tap", branch_fraction=Fraction(5, 8))
    elif name == "tap_mdfd":
        cfg = ModelConfig(
            variant="mdfd", context_pooling="tap", width=Fraction(5, 4), branch_fraction=Fraction(1, 4),
            dilations=parse_dilation_scheme("(1)x3+(2,3,3)"),
        )
    else:
        raise KeyError(f"unknown preset {name!r}")
    return replace(cfg, **overrides) if overrides else cfg


class Predictions(NamedTuple):
    strong: Tensor  # (B, classes, Tout)
    weak: Tensor  # (B, classes)


class ConvBlock(Module):
    """conv variant -> BN -> activation -> dropout -> average pool."""

    def __init__(self, layer_cfg: FdyLayerConfig, pool: Tuple[int, int], cfg: ModelConfig):
        super().__init__()
        if layer_cfg.variant == "static":
            self.conv = Conv2d(layer_cfg.in_channels, layer_cfg.out_channels)
        else:
            self.conv = FreqDynamicConv2d(
                layer_cfg, att_reduction=cfg.att_reduction, tap_kernel=cfg.tap_kernel,
                tap_reduction=cfg.tap_reduction, tap_velocity_input=cfg.tap_velocity_input,
            )
        self.bn = BatchNorm(layer_cfg.out_channels)
        self.gate = ContextGating(layer_cfg.out_channels) if cfg.activation == "cg" else None
        self.drop = Dropout(cfg.dropout)
        self.pool = (pool[1], pool[0])  # (freq, time) for the (B, C, F, T) layout

    def forward(self, x):
        x = self.bn(self.conv(x))
        x = self.gate(x) if self.gate is not None else ops.relu(x)
        x = self.drop(x)
        if self.pool != (1, 1):
            x = ops.avg_pool2d(x, self.pool)
        return x


class CRNN(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.cnn = ModuleList(
            ConvBlock(lc, pool, cfg) for lc, pool in zip(cfg.layer_configs(), cfg.pools)
        )
        self.rnn = BiGRU(cfg.channels[-1], cfg.gru_hidden, cfg.gru_layers)
        self.rnn_drop = Dropout(cfg.dropout)
        self.dense = Linear(2 * cfg.gru_hidden, cfg.n_classes)
        self.att_dense = Linear(2 * cfg.gru_hidden, cfg.n_classes)

    def forward(self, features) -> Predictions:
        x = features if isinstance(features, Tensor) else Tensor(features, dtype=self.dense.weight.dtype)
        if x.ndim == 3:
            x = ops.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels or x.shape[2] != self.cfg.n_mels:
            raise ValueError(
                f"expected features (B, {self.cfg.in_channels}, {self.cfg.n_mels}, T), got {x.shape}"
            )
        if x.shape[3] < self.cfg.time_pool:
            raise ValueError(f"need at least {self.cfg.time_pool} frames, got {x.shape[3]}")
        for block in self.cnn:
            x = block(x)
        B, C, F, T = x.shape
        x = ops.transpose(ops.reshape(x, (B, C * F, T)), (0, 2, 1))  # (B, T, C)
        x = self.rnn_drop(self.rnn(x))
        strong = ops.sigmoid(self.dense(x))  # (B, T, classes)
        att = ops.clamp_min(ops.softmax_axis(self.att_dense(x), axis=-1), 1e-7)
        weak = ops.div(ops.sum_axis(ops.mul(strong, att), axis=1), ops.sum_axis(att, axis=1))
        return Predictions(ops.transpose(strong, (0, 2, 1)), weak)


def build_model(cfg: ModelConfig, seed: int = 0) -> CRNN:
    return CRNN(cfg).finalize(seed)


def count_params(model: Module) -> int:
    return int(sum(p.size for p in model.parameters() if p.trainable))


def param_breakdown(model: CRNN) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for name, p in model.named_parameters():
        if not p.trainable:
            continue
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "cnn" else parts[0]
        out[key] = out.get(key, 0) + p.size
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"TAPSEDCK"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def save_checkpoint(path, tensors: Dict[str, np.ndarray], config_text: str) -> None:
    """Write named tensors plus a config blob.

    Layout (little-endian): magic[8], u32 version, u32 config length,
    config utf-8, u32 tensor count, then per tensor: u16 name length, name,
    u8 dtype code (1=f32, 2=f64), u8 ndim, u32 dims, raw data.
    """
    cfg = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                arr = arr.astype(np.float64)
                code = 2
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], str]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, clen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    config_text = data[pos: pos + clen].decode("utf-8")
    pos += clen
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos: pos + nl].decode("utf-8")
        pos += nl
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(shape).copy()
        pos += count * dt.itemsize
        tensors[name] = arr
    return tensors, config_text
