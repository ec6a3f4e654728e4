"""Minimal module tree: parameters, buffers, train/eval mode, seeded init."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .engine import Parameter, Tensor, default_dtype
from .engine import functional as F
from .rng import derive_rng


class Module:
    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_buffers(prefix + key + ".")

    def state(self) -> dict:
        """Name -> array for every parameter and buffer (the checkpoint namespace)."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state(self, state: dict) -> None:
        expected = self.state()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={missing} unexpected={unexpected}")
        for name, p in self.named_parameters():
            src = state[name]
            if src.shape != p.shape:
                raise ValueError(f"{name}: shape {src.shape} != {p.shape}")
            p.data = np.array(src, dtype=src.dtype)
        for name, buf in self.named_buffers():
            src = state[name]
            if src.shape != buf.shape:
                raise ValueError(f"{name}: shape {src.shape} != {buf.shape}")
            buf[...] = src

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for mod in self._modules():
            for key, val in list(vars(mod).items()):
                if isinstance(val, np.ndarray):
                    setattr(mod, key, val.astype(dtype))
        return self

    def _modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child._modules()


class ModuleList(Module):
    """Ordered container; children are named ``0``, ``1``, ..."""

    def __init__(self, modules=()):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, str(i), m)
        self._n = len(modules)

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, i: int) -> Module:
        return getattr(self, str(range(self._n)[i]))


def _param(shape, init: str) -> Parameter:
    p = Parameter(np.zeros(shape, dtype=default_dtype()))
    p.init = init
    return p


def init_parameters(model: Module, seed: int) -> None:
    """Name every parameter and draw its initial value.

    Each parameter gets its own random stream keyed by its dotted name, so
    two models that share a sub-tree (e.g. ablation variants) start that
    sub-tree from identical weights.
    """
    for name, p in model.named_parameters():
        p.name = name
        kind = getattr(p, "init", "kaiming")
        if kind == "zeros":
            p.data[...] = 0
        elif kind == "ones":
            p.data[...] = 1
        elif kind == "kaiming":
            fan_in = int(np.prod(p.shape[1:])) if p.ndim > 1 else p.shape[0]
            std = np.sqrt(2.0 / fan_in)
            p.data[...] = derive_rng(seed, "init", name).normal(0.0, std, size=p.shape)
        elif kind == "xavier":
            fan_in, fan_out = p.shape[0], p.shape[-1]
            std = np.sqrt(2.0 / (fan_in + fan_out))
            p.data[...] = derive_rng(seed, "init", name).normal(0.0, std, size=p.shape)
        else:
            raise ValueError(f"unknown init {kind!r} for {name}")


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: Optional[int] = None,
                 groups: int = 1, bias: bool = True):
        super().__init__()
        if cin % groups or cout % groups:
            raise ValueError(f"channels ({cin}, {cout}) not divisible by groups {groups}")
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        self.weight = _param((cout, cin // groups, k, k), "kaiming")
        if bias:
            self.bias = _param((cout,), "zeros")
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = _param((c,), "ones")
        self.beta = _param((c,), "zeros")
        self.running_mean = np.zeros(c, dtype=default_dtype())
        self.running_var = np.ones(c, dtype=default_dtype())
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class ConvBNReLU(Module):
    """3x3 (by default) conv, batch norm, ReLU."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, relu: bool = True):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride=stride, bias=False)
        self.bn = BatchNorm2d(cout)
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return F.relu(y) if self.relu else y


class Sequential(ModuleList):
    def forward(self, x):
        for m in self:
            x = m(x)
        return x
