"""Central-difference gradient checking for :mod:`gbt.tensor` functions."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``sum(fn(*arrays))`` with respect to ``arrays[index]``."""
    base = [np.array(a, dtype=float) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = target[i]
        target[i] = orig + h
        up = fn(*[Tensor(a) for a in base]).data.sum()
        target[i] = orig - h
        down = fn(*[Tensor(a) for a in base]).data.sum()
        target[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; absolute error when both are ~0."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if den < 1e-10:
        return float(num)
    return float(num / den)


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5,
              seed: int = 0, wrt: Sequence[int] | None = None) -> list[float]:
    """Compare backprop against central differences for every input in ``wrt``.

    The output is contracted with fixed random weights so every output entry
    contributes a distinct cotangent.  Returns one relative error per input.
    """
    arrays = [np.array(a, dtype=float) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed).normal(size=probe.shape)

    def weighted(*ts):
        return fn(*ts) * weights

    wrt = range(len(arrays)) if wrt is None else wrt
    errors = []
    for idx in wrt:
        inputs = [Tensor(a, requires_grad=(i == idx)) for i, a in enumerate(arrays)]
        out = weighted(*inputs).sum()
        out.backward()
        analytic = inputs[idx].grad if inputs[idx].grad is not None else np.zeros_like(arrays[idx])
        numeric = numerical_grad(weighted, arrays, idx, h)
        errors.append(relative_error(analytic, numeric))
    return errors
