"""Self-Regression stage: refine the Good Beginning with masked self-attention decoders.

The default stack has no cross-attention and no start token.  Both exist only
as ablation variants: ``start_token`` prepends the last ``s`` input values,
``cross_attention`` adds a cross sublayer fed by a second, trainable copy of
the first-stage encoder.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, MultiHeadAttention
from .config import TrainConfig
from .nn import Dropout, FeedForward, LayerNorm, Linear, Module
from .stage1 import DataEmbedding, PyramidEncoder, fold_channels, pyramid_shapes, unfold_channels
from .tensor import Tensor


class DecoderLayer(Module):
    """Masked self-attention (optionally with ESM) + feed-forward, post-norm.

    With ``cross=True`` a pre-norm cross-attention sublayer sits between the
    two; its output projection starts at zero so the layer initially behaves
    exactly like the plain one.
    """

    def __init__(self, config: TrainConfig, cross: bool = False, rng=None):
        super().__init__(rng)
        d = config.d_model2
        self.self_attn = MultiHeadAttention(
            AttentionConfig(d, config.heads2, config.dropout, causal=True, esm=config.esm,
                            esm_kernel=config.esm_kernel, esm_per_head=config.esm_per_head),
            rng=self.rng,
        )
        self.norm1 = LayerNorm(d, rng=self.rng)
        self.cross_attn = None
        if cross:
            self.cross_attn = MultiHeadAttention(AttentionConfig(d, config.heads2, config.dropout),
                                                 rng=self.rng, zero_output=True)
            self.norm_cross = LayerNorm(d, rng=self.rng)
        self.ff = FeedForward(d, config.ff_mult * d, config.dropout, rng=self.rng)
        self.norm2 = LayerNorm(d, rng=self.rng)
        self.drop = Dropout(config.dropout, rng=self.rng)

    def forward(self, x: Tensor, memory: Tensor | None = None) -> Tensor:
        x = self.norm1(x + self.drop(self.self_attn(x)))
        if self.cross_attn is not None:
            if memory is None:
                raise ValueError("cross-attention layer needs encoder memory")
            x = x + self.drop(self.cross_attn(self.norm_cross(x), memory))
        return self.norm2(x + self.drop(self.ff(x)))


class StageTwoModel(Module):
    """Good Beginning (B, horizon, C) -> refined forecast (B, horizon, C).

    With ``residual_head`` the output is ``good_beginning + head(h)`` and the
    head starts at zero, so an untrained stage reproduces its input.
    """

    def __init__(self, config: TrainConfig, n_channels: int = 1, n_time_features: int = 4,
                 channel_mode: str = "independent", rng=None):
        super().__init__(rng if rng is not None else np.random.default_rng(config.seed + 1))
        self.config = config
        self.n_channels = n_channels
        self.independent = channel_mode == "independent"
        self.io_channels = 1 if self.independent else n_channels
        d = config.d_model2
        self.embedding = DataEmbedding(self.io_channels, n_time_features, d, config.dropout,
                                       use_time=config.stage2_time_features, rng=self.rng)
        self.layers = [DecoderLayer(config, cross=config.cross_attention, rng=self.rng)
                       for _ in range(config.n_decoder_layers)]
        self.head = Linear(d, self.io_channels, rng=self.rng, zero_init=config.residual_head)
        self.aux_encoder = None
        if config.cross_attention:
            # only the main branch feeds the memory, so the extra branches are not built
            self.aux_encoder = PyramidEncoder(config.replace(n_pyramids=1), self.io_channels, n_time_features,
                                              rng=self.rng)
            self.memory_proj = Linear(pyramid_shapes(config)[0][1], d, rng=self.rng)

    def encode_memory(self, x, x_marks: np.ndarray | None) -> Tensor:
        """Main-branch terminal map of the auxiliary encoder, projected to d_model2."""
        xf, mf = fold_channels(T.as_tensor(x), x_marks, self.independent)
        return self.memory_proj(self.aux_encoder(xf, mf)[0])

    def decode(self, seq: Tensor, marks: np.ndarray | None, memory: Tensor | None = None) -> Tensor:
        """Embed → decoder stack → head on already-folded (B', L, io_channels) input."""
        h = self.embedding(seq, marks)
        for layer in self.layers:
            h = layer(h, memory)
        return self.head(h)

    def forward(self, good_beginning, y_marks: np.ndarray | None = None, x=None,
                x_marks: np.ndarray | None = None) -> Tensor:
        gb = T.as_tensor(good_beginning)
        if gb.ndim != 3 or gb.shape[1] != self.config.horizon or gb.shape[-1] != self.n_channels:
            raise T.DimensionError(
                f"stage 2 expects (B, {self.config.horizon}, {self.n_channels}), got {gb.shape}"
            )
        batch = gb.shape[0]
        gbf, ymf = fold_channels(gb, y_marks, self.independent)

        memory = None
        if self.aux_encoder is not None:
            if x is None:
                raise ValueError("cross-attention variant needs the input window")
            memory = self.encode_memory(x, x_marks)

        s = self.config.resolved_start_token_len if self.config.start_token else 0
        if s:
            if x is None:
                raise ValueError("start-token variant needs the input window")
            xf, xmf = fold_channels(T.as_tensor(x), x_marks, self.independent)
            seq = T.concat([xf[:, -s:], gbf], axis=1)
            marks = None if ymf is None or xmf is None else np.concatenate([xmf[:, -s:], ymf], axis=1)
            out = self.decode(seq, marks, memory)[:, s:]
        else:
            out = self.decode(gbf, ymf, memory)
        if self.config.residual_head:
            out = out + gbf
        return unfold_channels(out, batch, self.independent)


def stage2_forward(model: StageTwoModel, good_beginning, y_marks=None) -> Tensor:
    """Plain variant: refine a (horizon, C) or (B, horizon, C) Good Beginning."""
    gb = T.as_tensor(good_beginning)
    if gb.ndim == 2:
        m = None if y_marks is None else np.asarray(y_marks)[None]
        out = model(T.reshape(gb, (1,) + gb.shape), m)
        return out.reshape(out.shape[1:])
    return model(gb, y_marks)


def stage2_forward_with_start_token(model: StageTwoModel, input_tail, good_beginning,
                                    x_marks=None, y_marks=None) -> Tensor:
    """Start-token variant; ``input_tail`` is the whole input window, its last ``s`` rows are used."""
    if not model.config.start_token:
        raise ValueError("model was not built with start_token=True")
    return model(good_beginning, y_marks, x=input_tail, x_marks=x_marks)


def stage2_forward_with_cross(model: StageTwoModel, input_window, good_beginning,
                              x_marks=None, y_marks=None) -> Tensor:
    """Cross-attention variant; memory comes from the auxiliary encoder on ``input_window``."""
    if model.aux_encoder is None:
        raise ValueError("model was not built with cross_attention=True")
    return model(good_beginning, y_marks, x=input_window, x_marks=x_marks)
