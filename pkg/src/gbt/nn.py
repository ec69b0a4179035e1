"""Minimal layer toolkit on top of :mod:`gbt.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Container that discovers parameters and sub-modules from its attributes."""

    training: bool = True

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng if rng is not None else np.random.default_rng()
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name == "rng":
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_rng(self, rng: np.random.Generator) -> None:
        for m in self.modules():
            m.rng = rng

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise T.DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None, zero_init: bool = False):
        super().__init__(rng)
        self.in_features = in_features
        self.out_features = out_features
        bound = 1.0 / math.sqrt(in_features)
        if zero_init:
            self.weight = Parameter(np.zeros((in_features, out_features)))
        else:
            self.weight = Parameter(_uniform(self.rng, bound, (in_features, out_features)))
        self.bias = None
        if bias:
            self.bias = Parameter(np.zeros(out_features) if zero_init else _uniform(self.rng, bound, (out_features,)))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise T.DimensionError(f"Linear expects last dim {self.in_features}, got {x.shape}")
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, rng=None):
        super().__init__(rng)
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, p: float = 0.1, rng=None):
        super().__init__(rng)
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.training, self.rng)


class Conv1d(Module):
    """Plain 1-D convolution on (batch, channels, length) input."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int = 1, padding: int = 0, bias: bool = True, rng=None):
        super().__init__(rng)
        self.stride = stride
        self.padding = padding
        bound = 1.0 / math.sqrt(c_in * kernel_size)
        self.weight = Parameter(_uniform(self.rng, bound, (c_out, c_in, kernel_size)))
        self.bias = Parameter(_uniform(self.rng, bound, (c_out,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.stride, self.padding, self.bias)


class WNConv1d(Conv1d):
    """Weight-normalised convolution: direction ``v`` and per-channel gain ``g``."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int = 1, padding: int = 0, bias: bool = True, rng=None):
        super().__init__(c_in, c_out, kernel_size, stride, padding, bias, rng)
        # gain starts at ||v|| so the initial effective weight equals v
        self.gain = Parameter(np.sqrt((self.weight.data**2).sum(axis=(1, 2))))

    def effective_weight(self) -> Tensor:
        return T.weight_norm_apply(self.weight, self.gain)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.effective_weight(), self.stride, self.padding, self.bias)


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Standard fixed sin/cos position table of shape (length, dim)."""
    pos = np.arange(length, dtype=float)[:, None]
    div = np.exp(np.arange(0, dim, 2, dtype=float) * (-math.log(10000.0) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: dim // 2])
    return table


class FeedForward(Module):
    """Position-wise two-layer MLP with Gelu."""

    def __init__(self, dim: int, hidden: int, dropout: float = 0.1, rng=None):
        super().__init__(rng)
        self.fc1 = Linear(dim, hidden, rng=self.rng)
        self.fc2 = Linear(hidden, dim, rng=self.rng)
        self.drop = Dropout(dropout, rng=self.rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.drop(T.gelu(self.fc1(x))))
