"""Layer containers on top of :mod:`tapsed.ops`."""

from __future__ import annotations

import zlib
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, get_default_dtype


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())]))


class Module:
    """Parameter container with recursive naming, train/eval mode and state dicts."""

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # -- traversal ----------------------------------------------------------
    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Module, Parameter)):
                yield key, value
            elif isinstance(value, ModuleList):
                yield key, value

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for key, value in self._children():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Module):
                yield from value.named_modules(path)
            elif isinstance(value, ModuleList):
                for i, m in enumerate(value):
                    yield from m.named_modules(f"{path}.{i}")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in self._children():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, ModuleList):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{path}.{i}")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for path, mod in self.named_modules():
            for key, arr in mod._own_buffers().items():
                yield (f"{path}.{key}" if path else key), arr

    def _own_buffers(self) -> Dict[str, np.ndarray]:
        return {}

    # -- modes / naming -----------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def finalize(self, seed: int = 0) -> "Module":
        """Assign dotted names to parameters and initialise them deterministically."""
        for path, p in self.named_parameters():
            p.name = path
        for path, m in self.named_modules():
            m._path = path
            m.reset_parameters(seed)
        return self

    def reset_parameters(self, seed: int) -> None:
        pass

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_dropout_state(self, seed: int, step: int) -> None:
        for _, m in self.named_modules():
            if isinstance(m, Dropout):
                m.seed = seed
                m.step = step

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, arr in self.named_buffers():
            state[name] = arr.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for name, buf in buffers.items():
            buf[...] = state[name]

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self


class ModuleList(list):
    pass


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel=(3, 3), freq_dilation: int = 1, bias: bool = True):
        super().__init__()
        kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.freq_dilation = freq_dilation
        dt = get_default_dtype()
        self.weight = Parameter(np.zeros((out_channels, in_channels) + kernel, dtype=dt))
        self.bias = Parameter(np.zeros(out_channels, dtype=dt)) if bias else None

    def reset_parameters(self, seed):
        fan_in = self.in_channels * self.kernel[0] * self.kernel[1]
        rng = _param_rng(seed, self.weight.name)
        self.weight.data = kaiming_uniform(rng, self.weight.shape, fan_in).astype(self.weight.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.freq_dilation)


class BatchNorm(Module):
    """Batch normalization over (B, C, F, T); 1-d use passes T=1."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dt = get_default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dt))
        self.beta = Parameter(np.zeros(channels, dtype=dt))
        self._running_mean = np.zeros(channels)
        self._running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def _own_buffers(self):
        return {"running_mean": self._running_mean, "running_var": self._running_var}

    def reset_parameters(self, seed):
        self.gamma.data = np.ones_like(self.gamma.data)
        self.beta.data = np.zeros_like(self.beta.data)
        self._running_mean[...] = 0.0
        self._running_var[...] = 1.0

    def forward(self, x):
        return ops.batch_norm2d(
            x, self.gamma, self.beta, self._running_mean, self._running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        dt = get_default_dtype()
        self.in_features = in_features
        self.weight = Parameter(np.zeros((out_features, in_features), dtype=dt))
        self.bias = Parameter(np.zeros(out_features, dtype=dt)) if bias else None

    def reset_parameters(self, seed):
        rng = _param_rng(seed, self.weight.name)
        self.weight.data = kaiming_uniform(rng, self.weight.shape, self.in_features).astype(self.weight.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.seed = 0
        self.step = 0
        self._path = ""

    def forward(self, x):
        if not self.training or self.p == 0:
            return x
        rng = ops.dropout_rng(self.seed, self._path, self.step)
        return ops.dropout(x, self.p, True, rng)


class ContextGating(Module):
    """``x * sigmoid(W x + b)`` with W mixing channels (a 1x1 convolution)."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = Conv2d(channels, channels, kernel=(1, 1))

    def forward(self, x):
        return ops.mul(x, ops.sigmoid(self.proj(x)))


class GRUDirection(Module):
    def __init__(self, input_size: int, hidden: int):
        super().__init__()
        dt = get_default_dtype()
        self.hidden = hidden
        self.w_ih = Parameter(np.zeros((3 * hidden, input_size), dtype=dt))
        self.w_hh = Parameter(np.zeros((3 * hidden, hidden), dtype=dt))
        self.b_ih = Parameter(np.zeros(3 * hidden, dtype=dt))
        self.b_hh = Parameter(np.zeros(3 * hidden, dtype=dt))

    def reset_parameters(self, seed):
        k = 1.0 / np.sqrt(self.hidden)
        for p in (self.w_ih, self.w_hh):
            p.data = _param_rng(seed, p.name).uniform(-k, k, size=p.shape).astype(p.dtype)
        self.b_ih.data = np.zeros_like(self.b_ih.data)
        self.b_hh.data = np.zeros_like(self.b_hh.data)

    def forward(self, x, reverse=False):
        return ops.gru_direction(x, self.w_ih, self.w_hh, self.b_ih, self.b_hh, reverse=reverse)


class BiGRU(Module):
    """Stacked bidirectional GRU over (B, T, D) returning (B, T, 2H)."""

    def __init__(self, input_size: int, hidden: int, layers: int = 2, inter_dropout: float = 0.0):
        super().__init__()
        self.layers = ModuleList()
        for i in range(layers):
            d = input_size if i == 0 else 2 * hidden
            self.layers.append(_BiGRULayer(d, hidden))
        self.inter = Dropout(inter_dropout) if inter_dropout > 0 and layers > 1 else None

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            if i > 0 and self.inter is not None:
                x = self.inter(x)
            x = layer(x)
        return x


class _BiGRULayer(Module):
    def __init__(self, input_size, hidden):
        super().__init__()
        self.fwd = GRUDirection(input_size, hidden)
        self.bwd = GRUDirection(input_size, hidden)

    def forward(self, x):
        return ops.concat([self.fwd(x), self.bwd(x, reverse=True)], axis=-1)


def bigru(x: Tensor, layers: List[Tuple[Tuple[Tensor, ...], Tuple[Tensor, ...]]]) -> Tensor:
    """Functional stacked biGRU; each layer is ((fwd params), (bwd params))."""
    for fwd, bwd in layers:
        x = ops.concat([ops.gru_direction(x, *fwd), ops.gru_direction(x, *bwd, reverse=True)], axis=-1)
    return x


def count_parameters(module: Module) -> int:
    return int(sum(p.size for p in module.parameters() if p.trainable))
