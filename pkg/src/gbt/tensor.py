"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
operands and a closure mapping the upstream gradient onto them.  Calling
:meth:`Tensor.backward` on a scalar replays those closures in reverse
topological order.  Leaf tensors with ``requires_grad=True`` accumulate into
``.grad``; repeated ``backward`` calls without :meth:`Tensor.zero_grad` add up.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_grad_enabled = True
_debug_nonfinite = False


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf while debug checking is on."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_debug(enabled: bool) -> None:
    """Check every forward result for NaN/Inf (off by default for speed)."""
    global _debug_nonfinite
    _debug_nonfinite = bool(enabled)


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    global _debug_nonfinite
    prev = _debug_nonfinite
    _debug_nonfinite = enabled
    try:
        yield
    finally:
        _debug_nonfinite = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    # let numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------- autodiff
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor.

        Without ``grad`` the tensor must hold a single element.  Interior
        gradients live in a scratch dict so the graph can be replayed again;
        only leaves accumulate into ``.grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar loss, got shape {self.shape}; pass grad explicitly"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise DimensionError(f"grad shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __rpow__(self, base):
        # base ** x for a positive scalar base
        return exp(self * math.log(float(base)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _debug_nonfinite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return mul(a, float(factor))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _result(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return _result(x * cdf, (a,), backward, "gelu")


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        rng = np.random.default_rng()
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ----------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / n)


# ------------------------------------------------------------------ structure
def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), (a,), backward, "getitem")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=axis))

    return _result(out, tensors, backward, "concat")


# ---------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    """Batched matrix product; leading batch dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc
    if b.ndim == 2 and a.ndim > 2:
        # (..., k) @ (k, n): one flat GEMM instead of a batched one
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), backward, "matmul")

    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def causal_mask(n_query: int, n_key: int | None = None) -> np.ndarray:
    """Boolean (n_query, n_key) array, True where key j > query i (forbidden)."""
    n_key = n_query if n_key is None else n_key
    return np.triu(np.ones((n_query, n_key), dtype=bool), k=1)


def masked_softmax(scores: Tensor, causal: bool = False, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with forbidden positions forced to exactly 0.

    ``mask`` is boolean and broadcastable to ``scores``; True marks a forbidden
    entry.  ``causal=True`` forbids keys after the query position.  A row with
    no allowed entry is defined as uniform over the whole row.
    """
    x = scores.data
    forbid = None
    if causal:
        forbid = causal_mask(x.shape[-2], x.shape[-1])
    if mask is not None:
        forbid = mask if forbid is None else (forbid | mask)
    if forbid is not None:
        forbid = np.broadcast_to(forbid, x.shape)
        empty = forbid.all(axis=-1, keepdims=True)
        x = np.where(forbid, -np.inf, x)
        if empty.any():
            x = np.where(empty, 0.0, x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (scores,), backward, "masked_softmax")


def softmax(scores: Tensor) -> Tensor:
    return masked_softmax(scores)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "layer_norm")


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """1-D cross-correlation.

    ``x`` is (batch, c_in, L) and ``kernel`` is (c_out, c_in, k).  Output length
    is ``floor((L + 2*padding - k) / stride) + 1``.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"stride must be >=1 and padding >=0, got {stride}, {padding}")
    if x.ndim != 3 or kernel.ndim != 3:
        raise DimensionError(f"conv1d expects 3-d x and kernel, got {x.shape}, {kernel.shape}")
    b, c_in, length = x.shape
    c_out, kc_in, k = kernel.shape
    if kc_in != c_in:
        raise DimensionError(f"conv1d channel mismatch: x {x.shape} vs kernel {kernel.shape}")
    l_out = (length + 2 * padding - k) // stride + 1
    if l_out < 1:
        raise DimensionError(f"conv1d output length {l_out} < 1 for L={length}, k={k}, pad={padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, : (l_out - 1) * stride + 1 : stride]
    out = np.einsum("bclk,ock->bol", cols, kernel.data, optimize=True)
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        out = out + bias.data[None, :, None]
        parents = (x, kernel, bias)

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gcols = np.einsum("bol,ock->bclk", g, kernel.data, optimize=True)
            gxp = np.zeros_like(xp)
            stop = (l_out - 1) * stride + 1
            for kk in range(k):
                gxp[:, :, kk : kk + stop : stride] += gcols[..., kk]
            gx = gxp[:, :, padding : padding + length] if padding else gxp
        if kernel.requires_grad:
            gk = np.einsum("bol,bclk->ock", g, cols, optimize=True)
        if bias is None:
            return gx, gk
        gbias = g.sum(axis=(0, 2)) if bias.requires_grad else None
        return gx, gk, gbias

    return _result(np.ascontiguousarray(out), parents, backward, "conv1d")


def weight_norm_apply(raw_weight: Tensor, gain: Tensor) -> Tensor:
    """Weight normalisation: ``gain * raw / ||raw||`` per output channel (axis 0).

    ``gain`` holds one scalar per output channel.
    """
    c_out = raw_weight.shape[0]
    if gain.size != c_out:
        raise DimensionError(f"gain needs {c_out} entries, got shape {gain.shape}")
    flat_axes = tuple(range(1, raw_weight.ndim))
    norms = np.sqrt((raw_weight.data**2).sum(axis=flat_axes))
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise FloatingPointError(f"weight norm undefined: output channel {int(bad[0])} has zero norm")
    g = reshape(gain, (c_out,) + (1,) * len(flat_axes))
    norm = sqrt(tsum(raw_weight * raw_weight, axis=flat_axes, keepdims=True))
    return raw_weight * (g / norm)


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target)
    return mean(diff * diff)


__all__ = [
    "DTYPE",
    "DimensionError",
    "NonFiniteError",
    "Tensor",
    "add",
    "as_tensor",
    "causal_mask",
    "concat",
    "conv1d",
    "debug_mode",
    "div",
    "dropout",
    "exp",
    "gelu",
    "getitem",
    "is_grad_enabled",
    "layer_norm",
    "log",
    "masked_softmax",
    "matmul",
    "mean",
    "mse_loss",
    "mul",
    "no_grad",
    "power",
    "relu",
    "reshape",
    "scale",
    "set_debug",
    "sigmoid",
    "softmax",
    "sqrt",
    "sub",
    "tanh",
    "transpose",
    "tsum",
    "weight_norm_apply",
]
