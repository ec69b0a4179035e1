"""Scaled dot-product attention and the Error Score Modification (ESM) bias.

ESM adds a zero-centred Gaussian over key positions to the raw attention
scores of a masked self-attention layer.  Each query row ``i`` owns a learned
scale ``sigma_i`` so it can decide how strongly to favour the earliest
prediction elements, which are the most trustworthy part of the first-stage
output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor

ESM_KERNELS = ("pdf", "logpdf", "kernel")

# sigma = 3 ** (sigmoid(5 * raw) + 1e-5) - 1 lives strictly inside these limits
SIGMA_LOWER = 3.0**1e-5 - 1.0
SIGMA_UPPER = 3.0 ** (1.0 + 1e-5) - 1.0


@dataclass
class AttentionConfig:
    model_dim: int
    heads: int
    dropout: float = 0.1
    causal: bool = False
    esm: bool = False
    esm_kernel: str = "pdf"
    esm_per_head: bool = False

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.esm_kernel not in ESM_KERNELS:
            raise ValueError(f"esm_kernel must be one of {ESM_KERNELS}, got {self.esm_kernel!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def scaled_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    causal: bool = False,
    bias: Tensor | None = None,
    dropout: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T / sqrt(d_head) + bias)`` with optional causal mask, times ``v``.

    Inputs are (batch, heads, L, d_head).  The bias is added before masking,
    so masked positions end up exactly zero whatever the bias holds.
    Returns ``(output, attention_weights)``.
    """
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise T.DimensionError(f"attention expects 4-d q/k/v, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise T.DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        scores = scores + bias
    weights = T.masked_softmax(scores, causal=causal)
    weights_d = T.dropout(weights, dropout, training, rng)
    return T.matmul(weights_d, v), weights


def esm_transform(raw: Tensor) -> Tensor:
    """Map a raw projection to a positive scale: ``3 ** (sigmoid(5 raw) + 1e-5) - 1``."""
    s = T.sigmoid(raw * 5.0) + 1e-5
    return 3.0**s - 1.0


def esm_bias(sigma: Tensor, n_keys: int | None = None, kernel: str = "pdf") -> Tensor:
    """Gaussian score bias ``G[..., i, j]`` for key positions ``j = 0..n_keys-1``.

    ``sigma`` has shape (..., L, 1); row ``i`` uses ``sigma_i``.  With the
    default ``"pdf"`` kernel ``G[i, j] = exp(-j^2 / (2 sigma_i^2)) / (sqrt(2 pi) sigma_i)``.
    ``"logpdf"`` returns its logarithm and ``"kernel"`` drops the normaliser.
    """
    if kernel not in ESM_KERNELS:
        raise ValueError(f"kernel must be one of {ESM_KERNELS}, got {kernel!r}")
    if sigma.shape[-1] != 1:
        raise T.DimensionError(f"sigma must end in a singleton axis, got {sigma.shape}")
    if np.any(sigma.data <= 0):
        raise ValueError("ESM scale sigma must be strictly positive")
    n_keys = sigma.shape[-2] if n_keys is None else n_keys
    j2 = np.arange(n_keys, dtype=float) ** 2
    inv_var = (sigma * sigma) ** -1.0
    expo = inv_var * (-0.5 * j2)
    if kernel == "logpdf":
        return expo - T.log(sigma * math.sqrt(2.0 * math.pi))
    g = T.exp(expo)
    if kernel == "kernel":
        return g
    return g / (sigma * math.sqrt(2.0 * math.pi))


class EsmSigma(Module):
    """Linear map d -> 1 (or one per head) followed by :func:`esm_transform`."""

    def __init__(self, dim: int, outputs: int = 1, rng=None):
        super().__init__(rng)
        self.proj = Linear(dim, outputs, rng=self.rng)

    def forward(self, x: Tensor) -> Tensor:
        return esm_transform(self.proj(x))


class MultiHeadAttention(Module):
    """Multi-head attention; self-attention when ``memory`` is omitted.

    ``zero_output`` zero-initialises the output projection so a residual
    branch built on this layer starts as the identity.
    """

    def __init__(self, config: AttentionConfig, rng=None, zero_output: bool = False):
        super().__init__(rng)
        self.config = config
        d = config.model_dim
        self.q_proj = Linear(d, d, rng=self.rng)
        self.k_proj = Linear(d, d, rng=self.rng)
        self.v_proj = Linear(d, d, rng=self.rng)
        self.out_proj = Linear(d, d, rng=self.rng, zero_init=zero_output)
        self.esm = EsmSigma(d, config.heads if config.esm_per_head else 1, rng=self.rng) if config.esm else None
        self.last_weights: Tensor | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        h = self.config.heads
        return x.reshape(b, n, h, self.config.head_dim).transpose(0, 2, 1, 3)

    def esm_scores_bias(self, x: Tensor) -> Tensor:
        sigma = self.esm(x)  # (B, L, 1) or (B, L, h)
        if sigma.shape[-1] == 1:
            return T.reshape(esm_bias(sigma, kernel=self.config.esm_kernel), (x.shape[0], 1, x.shape[1], x.shape[1]))
        per_head = sigma.transpose(0, 2, 1).reshape(x.shape[0], self.config.heads, x.shape[1], 1)
        return esm_bias(per_head, kernel=self.config.esm_kernel)

    def forward(self, x: Tensor, memory: Tensor | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.config.model_dim:
            raise T.DimensionError(f"attention input must be (B, L, {self.config.model_dim}), got {x.shape}")
        src = x if memory is None else memory
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(src))
        v = self._split(self.v_proj(src))
        bias = None
        if self.esm is not None and memory is None:
            bias = self.esm_scores_bias(x)
        out, weights = scaled_attention(
            q,
            k,
            v,
            causal=self.config.causal and memory is None,
            bias=bias,
            dropout=self.config.dropout,
            training=self.training,
            rng=self.rng,
        )
        self.last_weights = weights
        b, _, n, _ = out.shape
        merged = out.transpose(0, 2, 1, 3).reshape(b, n, self.config.model_dim)
        return self.out_proj(merged)


def masked_self_attention_esm(x: Tensor, layer: MultiHeadAttention) -> Tensor:
    """Causal self-attention of a (L, d) or (B, L, d) sequence through ``layer``."""
    if x.ndim == 2:
        return layer(T.reshape(x, (1,) + x.shape)).reshape(x.shape)
    return layer(x)
