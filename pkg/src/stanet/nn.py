"""Parameter containers and the layers the network is assembled from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Minimal module tree: attributes holding Parameters, buffers or Modules."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._modules[name] = module
        object.__setattr__(self, name, module)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data) for k, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        params = dict(self.named_parameters())
        for name, value in state.items():
            target = params[name].data if name in params else own[name]
            if target.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {target.shape}")
            target[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleDict(Module):
    def __init__(self, modules: Optional[Dict[str, Module]] = None):
        super().__init__()
        for k, m in (modules or {}).items():
            self.add_module(str(k), m)

    def __getitem__(self, key) -> Module:
        return self._modules[str(key)]

    def __contains__(self, key) -> bool:
        return str(key) in self._modules

    def __len__(self) -> int:
        return len(self._modules)

    def keys(self):
        return self._modules.keys()

    def items(self):
        return self._modules.items()


class Linear(Module):
    """``y = x @ W + b`` with W stored as (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(glorot_uniform(rng, (d_in, d_out), d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv(Module):
    """N-d convolution; ``kernel`` is a tuple whose length sets the rank."""

    def __init__(self, c_in: int, c_out: int, kernel: Tuple[int, ...], rng: np.random.Generator,
                 stride=1, padding=0, bias: bool = True):
        super().__init__()
        k = int(np.prod(kernel))
        self.weight = Parameter(glorot_uniform(rng, (c_out, c_in) + tuple(kernel), c_in * k, c_out * k))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.convnd(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        dtype = get_default_dtype()
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class ConvBN(Module):
    """Convolution, batch norm and an optional relu.

    The convolution has no bias: batch norm subtracts the per-channel mean, so
    a bias would cancel exactly and only ever receive rounding-noise gradients.
    """

    def __init__(self, c_in: int, c_out: int, kernel: Tuple[int, ...], rng: np.random.Generator,
                 stride=1, padding=0, activate: bool = True):
        super().__init__()
        self.conv = Conv(c_in, c_out, kernel, rng, stride=stride, padding=padding, bias=False)
        self.bn = BatchNorm(c_out)
        self.activate = activate

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return y.relu() if self.activate else y
