"""Two-stage Transformer forecasting on a small numpy autodiff core.

Stage 1 (Auto-Regression) turns the input window into a first forecast, the
"Good Beginning".  Stage 2 (Self-Regression) is trained afterwards with stage 1
frozen and refines that forecast with causal self-attention whose scores carry
a learned Gaussian bias towards the earliest prediction steps (ESM).
"""

from .attention import AttentionConfig, MultiHeadAttention, esm_bias, esm_transform, scaled_attention
from .checkpoint import load_checkpoint, parameter_digest, save_checkpoint
from .config import ConfigError, DataConfig, RunConfig, TrainConfig, load_config, parse_config
from .data import (
    DataError,
    SeriesDataset,
    SplitSpec,
    build_dataset,
    dataset_from_config,
    load_csv,
    make_windows,
    synthetic_series,
)
from .evaluation import EvalReport, mae, mse, mse_t, robustness, zero_init_diagnostic
from .stage1 import StageOneModel, stage1_predict
from .stage2 import StageTwoModel, stage2_forward, stage2_forward_with_cross, stage2_forward_with_start_token
from .tensor import Tensor, no_grad
from .trainer import load_trained, run_ablation_suite, train, train_simultaneous, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "ConfigError",
    "DataConfig",
    "DataError",
    "EvalReport",
    "MultiHeadAttention",
    "RunConfig",
    "SeriesDataset",
    "SplitSpec",
    "StageOneModel",
    "StageTwoModel",
    "Tensor",
    "TrainConfig",
    "build_dataset",
    "dataset_from_config",
    "esm_bias",
    "esm_transform",
    "load_checkpoint",
    "load_config",
    "load_csv",
    "load_trained",
    "mae",
    "make_windows",
    "mse",
    "mse_t",
    "no_grad",
    "parameter_digest",
    "parse_config",
    "robustness",
    "run_ablation_suite",
    "save_checkpoint",
    "scaled_attention",
    "stage1_predict",
    "stage2_forward",
    "stage2_forward_with_cross",
    "stage2_forward_with_start_token",
    "synthetic_series",
    "train",
    "train_simultaneous",
    "train_stage1",
    "train_stage2",
    "zero_init_diagnostic",
]
