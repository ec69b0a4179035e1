"""Auto-Regression stage: embedding, AR Blocks, pyramid branches and FC head.

Its forecast (the "Good Beginning") only looks at the input window.  Each AR
Block is a self-attention encoder layer without feed-forward sublayer,
followed by a ConvBlock that halves the sequence length and doubles the
channel count.  Extra pyramid branches see a 2x, 4x, ... shorter copy of the
embedded input and use one AR Block fewer each, so every branch ends at the
same length.  Terminal maps are flattened, concatenated and mapped to the
horizon by one linear layer.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, MultiHeadAttention
from .config import TrainConfig
from .nn import Conv1d, Dropout, FeedForward, LayerNorm, Linear, Module, WNConv1d, sinusoidal_encoding
from .tensor import Tensor


class DataEmbedding(Module):
    """Value projection + sinusoidal position table + calendar projection (no biases)."""

    def __init__(self, in_channels: int, n_time_features: int, dim: int, dropout: float = 0.1,
                 max_len: int = 5000, use_time: bool = True, rng=None):
        super().__init__(rng)
        self.in_channels = in_channels
        self.dim = dim
        self.value = Linear(in_channels, dim, bias=False, rng=self.rng)
        self.time = Linear(n_time_features, dim, bias=False, rng=self.rng) if use_time and n_time_features else None
        self.position = sinusoidal_encoding(max_len, dim)
        self.drop = Dropout(dropout, rng=self.rng)

    def forward(self, x: Tensor, marks: np.ndarray | None = None) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise T.DimensionError(f"embedding expects {self.in_channels} channels, got {x.shape[-1]}")
        out = self.value(x) + self.position[: x.shape[1]]
        if self.time is not None and marks is not None:
            out = out + self.time(T.as_tensor(marks))
        return self.drop(out)


class ConvBlock(Module):
    """Res-P (stride-2, halves length) then Res-C (doubles channels).

    Both convolutions are weight-normalised with Gelu activation; residual
    paths are 1x1 convolutions (stride 2 for Res-P, channel-doubling for Res-C).
    Maps (B, L, d) to (B, ceil(L/2), 2d).
    """

    def __init__(self, dim: int, kernel_size: int = 3, dropout: float = 0.1, rng=None):
        super().__init__(rng)
        pad = kernel_size // 2
        self.res_p = WNConv1d(dim, dim, kernel_size, stride=2, padding=pad, rng=self.rng)
        self.skip_p = Conv1d(dim, dim, 1, stride=2, rng=self.rng)
        self.res_c = WNConv1d(dim, 2 * dim, kernel_size, stride=1, padding=pad, rng=self.rng)
        self.skip_c = Conv1d(dim, 2 * dim, 1, rng=self.rng)
        self.drop = Dropout(dropout, rng=self.rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] < 2:
            raise T.DimensionError(f"ConvBlock needs sequence length >= 2, got {x.shape[1]}")
        h = x.transpose(0, 2, 1)
        p = T.gelu(self.res_p(h)) + self.skip_p(h)
        c = T.gelu(self.res_c(p)) + self.skip_c(p)
        return self.drop(c).transpose(0, 2, 1)


def conv_block(x: Tensor, block: ConvBlock) -> Tensor:
    """Apply ``block`` to a single (L, d) sequence or a (B, L, d) batch."""
    if x.ndim == 2:
        out = block(T.reshape(x, (1,) + x.shape))
        return out.reshape(out.shape[1:])
    return block(x)


class FeedForwardBlock(Module):
    """Length-preserving stand-in for ConvBlock (ablation): residual MLP + LayerNorm."""

    def __init__(self, dim: int, dropout: float = 0.1, rng=None):
        super().__init__(rng)
        self.ff = FeedForward(dim, 4 * dim, dropout, rng=self.rng)
        self.norm = LayerNorm(dim, rng=self.rng)
        self.drop = Dropout(dropout, rng=self.rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x + self.drop(self.ff(x)))


class ARBlock(Module):
    """Encoder layer without feed-forward (post-norm) followed by a ConvBlock."""

    def __init__(self, dim: int, heads: int, kernel_size: int, dropout: float, convblock: bool = True, rng=None):
        super().__init__(rng)
        self.attn = MultiHeadAttention(AttentionConfig(dim, heads, dropout), rng=self.rng)
        self.norm = LayerNorm(dim, rng=self.rng)
        self.drop = Dropout(dropout, rng=self.rng)
        self.block = ConvBlock(dim, kernel_size, dropout, rng=self.rng) if convblock else FeedForwardBlock(dim, dropout, rng=self.rng)
        self.out_dim = 2 * dim if convblock else dim

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm(x + self.drop(self.attn(x)))
        return self.block(x)


def _downsample(x: Tensor, factor: int, mode: str) -> Tensor:
    if factor == 1:
        return x
    if mode == "subsample":
        return x[:, ::factor]
    b, n, d = x.shape
    usable = (n // factor) * factor
    return x[:, :usable].reshape(b, n // factor, factor, d).mean(axis=2)


class PyramidEncoder(Module):
    """Embedding plus pyramid branches; ``forward`` returns the terminal map of each branch."""

    def __init__(self, config: TrainConfig, in_channels: int, n_time_features: int, rng=None):
        super().__init__(rng)
        self.config = config
        d = config.d_model1
        self.embedding = DataEmbedding(in_channels, n_time_features, d, config.dropout, rng=self.rng)
        self.branches: list[_Branch] = []
        for p in range(config.pyramid_levels):
            self.branches.append(_Branch(config, config.n_blocks - p, rng=self.rng))

    def forward(self, x: Tensor, marks: np.ndarray | None = None) -> list[Tensor]:
        emb = self.embedding(x, marks)
        return [
            branch(_downsample(emb, 2**p, self.config.pyramid_downsample))
            for p, branch in enumerate(self.branches)
        ]


class _Branch(Module):
    def __init__(self, config: TrainConfig, n_blocks: int, rng=None):
        super().__init__(rng)
        self.blocks: list[ARBlock] = []
        dim = config.d_model1
        for _ in range(n_blocks):
            block = ARBlock(dim, config.heads1, config.kernel_size, config.dropout, config.convblock, rng=self.rng)
            self.blocks.append(block)
            dim = block.out_dim
        self.out_dim = dim

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def pyramid_shapes(config: TrainConfig) -> list[tuple[int, int]]:
    """Terminal (length, channels) of each branch for the effective input length."""
    shapes = []
    for p in range(config.pyramid_levels):
        length = -(-config.effective_input_len // 2**p) if config.pyramid_downsample == "subsample" \
            else config.effective_input_len // 2**p
        dim = config.d_model1
        for _ in range(config.n_blocks - p):
            if config.convblock:
                length = -(-length // 2)
                dim *= 2
        shapes.append((length, dim))
    return shapes


def fold_channels(x: np.ndarray | Tensor, marks: np.ndarray | None, independent: bool):
    """Turn (B, L, C) into (B*C, L, 1) when channels are independent instances."""
    if not independent:
        return x, marks
    xt = T.as_tensor(x)
    b, n, c = xt.shape
    folded = xt.transpose(0, 2, 1).reshape(b * c, n, 1)
    if marks is not None:
        marks = np.repeat(marks, c, axis=0)
    return folded, marks


def unfold_channels(y: Tensor, batch: int, independent: bool) -> Tensor:
    if not independent:
        return y
    bc, n, _ = y.shape
    return y.reshape(batch, bc // batch, n).transpose(0, 2, 1)


class StageOneModel(Module):
    """Input window (B, t0, C) -> Good Beginning (B, horizon, C)."""

    def __init__(self, config: TrainConfig, n_channels: int = 1, n_time_features: int = 4,
                 channel_mode: str = "independent", rng=None):
        super().__init__(rng if rng is not None else np.random.default_rng(config.seed))
        self.config = config
        self.n_channels = n_channels
        self.independent = channel_mode == "independent"
        self.io_channels = 1 if self.independent else n_channels
        self.encoder = PyramidEncoder(config, self.io_channels, n_time_features, rng=self.rng)
        self.feature_dim = sum(n * d for n, d in pyramid_shapes(config))
        self.head = Linear(self.feature_dim, config.horizon * self.io_channels, rng=self.rng)

    def _pad(self, x: Tensor, marks):
        extra = self.config.effective_input_len - x.shape[1]
        if extra <= 0:
            return x, marks
        # left replication of the first step
        x = T.concat([x[:, :1]] * extra + [x], axis=1)
        if marks is not None:
            marks = np.concatenate([np.repeat(marks[:, :1], extra, axis=1), marks], axis=1)
        return x, marks

    def features(self, x, marks: np.ndarray | None = None) -> list[Tensor]:
        """Terminal map of every pyramid branch, after channel folding."""
        xf, mf = fold_channels(T.as_tensor(x), marks, self.independent)
        xf, mf = self._pad(xf, mf)
        return self.encoder(xf, mf)

    def forward(self, x, marks: np.ndarray | None = None) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.n_channels or x.shape[1] != self.config.input_len:
            raise T.DimensionError(
                f"stage 1 expects (B, {self.config.input_len}, {self.n_channels}), got {x.shape}"
            )
        feats = self.features(x, marks)
        flat = T.concat([f.reshape(f.shape[0], -1) for f in feats], axis=1)
        out = self.head(flat).reshape(flat.shape[0], self.config.horizon, self.io_channels)
        return unfold_channels(out, x.shape[0], self.independent)


def stage1_predict(model: StageOneModel, window, marks: np.ndarray | None = None) -> Tensor:
    """Forecast for one (t0, C) window or a (B, t0, C) batch."""
    x = T.as_tensor(window)
    if x.ndim == 2:
        m = None if marks is None else np.asarray(marks)[None]
        out = model(T.reshape(x, (1,) + x.shape), m)
        return out.reshape(out.shape[1:])
    return model(x, marks)
