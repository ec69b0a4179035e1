"""Two-phase training, the simultaneous ablation and the ablation roster.

Phase 1 fits the Auto-Regression stage alone.  Phase 2 freezes it (its
parameters leave the optimiser and the gradient graph) and fits the
Self-Regression stage on its eval-mode forecasts.  A parameter digest taken
before and after phase 2 must match bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, parameter_digest, save_checkpoint
from .config import TrainConfig
from .data import Batch, SeriesDataset, Windows
from .evaluation import EvalReport, evaluate, mse, predict_windows
from .nn import Module
from .optim import Adam
from .stage1 import StageOneModel
from .stage2 import StageTwoModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainRecord:
    mode: str
    stage1: list[EpochLog] = field(default_factory=list)
    stage2: list[EpochLog] = field(default_factory=list)
    joint: list[EpochLog] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint_path: str | None = None
    stage1_checkpoint_path: str | None = None
    stage1_digest_before: str | None = None
    stage1_digest_after: str | None = None
    optimizer_param_count: dict[str, int] = field(default_factory=dict)
    best_val: dict[str, float] = field(default_factory=dict)
    initial_val: dict[str, float] = field(default_factory=dict)

    @property
    def freeze_held(self) -> bool:
        return self.stage1_digest_before == self.stage1_digest_after

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


@dataclass
class TrainResult:
    config: TrainConfig
    stage1: StageOneModel
    stage2: StageTwoModel | None
    record: TrainRecord
    test_report: EvalReport | None = None
    first_stage_report: EvalReport | None = None


def build_models(config: TrainConfig, dataset: SeriesDataset, with_stage2: bool = True):
    kw = dict(n_channels=dataset.n_channels, n_time_features=dataset.n_time_features,
              channel_mode=dataset.channel_mode)
    s1 = StageOneModel(config, rng=np.random.default_rng(config.seed), **kw)
    s2 = StageTwoModel(config, rng=np.random.default_rng(config.seed + 1), **kw) if with_stage2 else None
    return s1, s2


def epoch_lr(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.lr_decay**epoch


def _iterate(windows: Windows, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; the last partial batch is kept."""
    order = rng.permutation(len(windows))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield windows.batch(idx), idx


def _fit(
    name: str,
    modules: list[Module],
    params: list,
    loss_fn: Callable[[Batch, np.ndarray], T.Tensor],
    val_fn: Callable[[], float],
    config: TrainConfig,
    train_windows: Windows,
    log_list: list[EpochLog],
    rng: np.random.Generator,
) -> float:
    """Adam with per-epoch halving, early stopping and best-val restore.  Returns the best val loss."""
    opt = Adam(params, lr=config.lr)
    best = math.inf
    best_states = None
    bad = 0
    for epoch in range(config.max_epochs):
        opt.lr = epoch_lr(config, epoch)
        for m in modules:
            m.train()
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for batch, idx in _iterate(train_windows, config.batch_size, rng):
            opt.zero_grad()
            loss = loss_fn(batch, idx)
            loss.backward()
            opt.step()
            total += loss.item() * len(batch.x)
            count += len(batch.x)
        train_loss = total / count
        val = val_fn()
        entry = EpochLog(epoch, opt.lr, train_loss, val, time.perf_counter() - t0)
        log_list.append(entry)
        log.info("%s epoch %d lr=%.3g train=%.6f val=%.6f (%.1fs)", name, epoch, opt.lr, train_loss, val, entry.seconds)
        if not (math.isfinite(val) and math.isfinite(train_loss)):
            raise TrainingDiverged(f"{name}: non-finite loss at epoch {epoch} (train={train_loss}, val={val})")
        if val < best:
            best = val
            best_states = [m.state_dict() for m in modules]
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    if best_states is not None:
        for m, state in zip(modules, best_states):
            m.load_state_dict(state)
    for m in modules:
        m.eval()
    return best


def _val_mse(stage1, stage2, windows: Windows, use_stage2: bool) -> float:
    pred = predict_windows(stage1, stage2, windows, use_stage2)
    return mse(pred, windows.all().y)


def train_stage1(config: TrainConfig, dataset: SeriesDataset, record: TrainRecord | None = None,
                 model: StageOneModel | None = None):
    """Phase 1: fit the Auto-Regression stage on its own MSE."""
    record = record or TrainRecord(mode=config.mode)
    stage1 = model or build_models(config, dataset, with_stage2=False)[0]
    tr = dataset.windows("train", config.input_len, config.horizon)
    va = dataset.windows("val", config.input_len, config.horizon)
    params = stage1.parameters()
    record.optimizer_param_count["stage1"] = sum(p.size for p in params)
    record.initial_val["stage1"] = _val_mse(stage1, None, va, False)

    def loss_fn(b: Batch, idx):
        return T.mse_loss(stage1(b.x, b.x_mark), b.y)

    record.best_val["stage1"] = _fit("stage1", [stage1], params, loss_fn,
                                     lambda: _val_mse(stage1, None, va, False),
                                     config, tr, record.stage1, np.random.default_rng(config.seed))
    return stage1, record


def _stage1_cache(stage1: StageOneModel, windows: Windows) -> np.ndarray:
    return predict_windows(stage1, None, windows, use_stage2=False)


def train_stage2(config: TrainConfig, dataset: SeriesDataset, frozen: StageOneModel,
                 record: TrainRecord | None = None, model: StageTwoModel | None = None):
    """Phase 2: freeze ``frozen`` and fit the Self-Regression stage on its forecasts."""
    record = record or TrainRecord(mode=config.mode)
    frozen.freeze()
    frozen.eval()
    record.stage1_digest_before = parameter_digest(frozen.state_dict())
    stage2 = model or StageTwoModel(config, dataset.n_channels, dataset.n_time_features, dataset.channel_mode,
                                    rng=np.random.default_rng(config.seed + 1))
    tr = dataset.windows("train", config.input_len, config.horizon)
    va = dataset.windows("val", config.input_len, config.horizon)
    params = stage2.parameters()
    frozen_ids = {id(p) for p in frozen.parameters()}
    if any(id(p) in frozen_ids for p in params):
        raise FreezeViolation("stage-1 parameters leaked into the stage-2 optimiser")
    record.optimizer_param_count["stage2"] = sum(p.size for p in params)

    cache = _stage1_cache(frozen, tr) if config.cache_stage1 else None

    def loss_fn(b: Batch, idx):
        if cache is not None:
            gb = T.Tensor(cache[idx])
        else:
            # recomputed per batch in eval mode, outside the graph
            with T.no_grad():
                gb = frozen(b.x, b.x_mark)
        pred = stage2(gb, b.y_mark, x=b.x, x_marks=b.x_mark)
        return T.mse_loss(pred, b.y)

    record.initial_val["stage2"] = _val_mse(frozen, stage2, va, True)
    record.best_val["stage2"] = _fit("stage2", [stage2], params, loss_fn,
                                     lambda: _val_mse(frozen, stage2, va, True),
                                     config, tr, record.stage2,
                                     np.random.default_rng(config.seed + 1))
    record.stage1_digest_after = parameter_digest(frozen.state_dict())
    if not record.freeze_held:
        raise FreezeViolation("stage-1 parameters changed during stage-2 training")
    return stage2, record


def train_simultaneous(config: TrainConfig, dataset: SeriesDataset, record: TrainRecord | None = None):
    """Ablation: one optimiser over both stages and a single end-to-end loss."""
    record = record or TrainRecord(mode="simultaneous")
    stage1, stage2 = build_models(config, dataset)
    tr = dataset.windows("train", config.input_len, config.horizon)
    va = dataset.windows("val", config.input_len, config.horizon)
    params = stage1.parameters() + stage2.parameters()
    record.optimizer_param_count["joint"] = sum(p.size for p in params)

    def loss_fn(b: Batch, idx):
        gb = stage1(b.x, b.x_mark)
        return T.mse_loss(stage2(gb, b.y_mark, x=b.x, x_marks=b.x_mark), b.y)

    record.initial_val["joint"] = _val_mse(stage1, stage2, va, True)
    record.best_val["joint"] = _fit("joint", [stage1, stage2], params, loss_fn,
                                    lambda: _val_mse(stage1, stage2, va, True),
                                    config, tr, record.joint, np.random.default_rng(config.seed))
    return stage1, stage2, record


def checkpoint_meta(config: TrainConfig, dataset: SeriesDataset) -> dict:
    return {
        "config": config.to_dict(),
        "mode": config.mode,
        "variant": {k: getattr(config, k) for k in ("esm", "convblock", "pyramid", "start_token", "cross_attention")},
        "input_len": config.input_len,
        "horizon": config.horizon,
        "n_channels": dataset.n_channels,
        "n_time_features": dataset.n_time_features,
        "channel_mode": dataset.channel_mode,
        "dataset_digest": dataset.digest,
    }


def train(config: TrainConfig, dataset: SeriesDataset, out_dir: str | Path | None = None,
          stage1: StageOneModel | None = None) -> TrainResult:
    """Run the configured training mode, score the test split and optionally write artefacts.

    A pre-trained ``stage1`` may be supplied for two-stage runs; it is reused
    instead of retraining phase 1 (its log then stays empty).
    """
    start = time.perf_counter()
    record = TrainRecord(mode=config.mode)
    out = Path(out_dir) if out_dir is not None else None
    meta = checkpoint_meta(config, dataset)
    stage2 = None

    if config.mode == "simultaneous":
        stage1, stage2, record = train_simultaneous(config, dataset, record)
    else:
        if stage1 is None:
            stage1, record = train_stage1(config, dataset, record)
        if out is not None:
            record.stage1_checkpoint_path = str(save_checkpoint(out / "stage1.npz", {"stage1": stage1.state_dict()},
                                                                {**meta, "phase": "stage1"}))
        if config.mode == "two_stage":
            stage2, record = train_stage2(config, dataset, stage1, record)

    stages = {"stage1": stage1.state_dict()}
    if stage2 is not None:
        stages["stage2"] = stage2.state_dict()
    record.wall_clock = time.perf_counter() - start
    use2 = stage2 is not None
    test = evaluate(stage1, stage2, dataset, config.input_len, config.horizon, "test", use2, config.to_dict())
    first = test if not use2 else evaluate(stage1, None, dataset, config.input_len, config.horizon, "test", False,
                                           config.to_dict())
    if out is not None:
        record.checkpoint_path = str(save_checkpoint(out / "gbt.npz", stages, {**meta, "phase": "final"}))
        record.write(out / "train_record.json")
    return TrainResult(config, stage1, stage2, record, test, first)


def load_trained(path: str | Path):
    """Rebuild ``(config, stage1, stage2_or_None, meta)`` from a checkpoint written by :func:`train`."""
    stages, meta = load_checkpoint(path)
    if "config" not in meta or "stage1" not in stages:
        raise CheckpointError(f"{path}: not a model checkpoint (stages {sorted(stages)})")
    config = TrainConfig(**meta["config"])
    kw = dict(n_channels=meta["n_channels"], n_time_features=meta["n_time_features"],
              channel_mode=meta["channel_mode"])
    stage1 = StageOneModel(config, **kw)
    try:
        stage1.load_state_dict(stages["stage1"])
        stage2 = None
        if "stage2" in stages:
            stage2 = StageTwoModel(config, **kw)
            stage2.load_state_dict(stages["stage2"])
    except (KeyError, T.DimensionError) as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {exc}") from None
    stage1.eval()
    if stage2 is not None:
        stage2.eval()
    return config, stage1, stage2, meta


# ----------------------------------------------------------------- ablation
ABLATION_VARIANTS = ("first", "second", "simul", "wo-ESM", "wo-CB", "wo-Pyra", "w-st", "w-cross")

_STAGE2_ONLY = ("esm", "start_token", "cross_attention", "two_stage", "first_only", "simultaneous",
                "d_model2", "heads2", "n_decoder_layers", "ff_mult", "esm_kernel", "esm_per_head",
                "stage2_time_features", "residual_head", "start_token_len", "cache_stage1")


def variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    base = config.replace(two_stage=None, first_only=None, simultaneous=None, esm=True, convblock=True,
                          pyramid=True, start_token=False, cross_attention=False)
    changes = {
        "first": dict(first_only=True),
        "second": dict(two_stage=True),
        "simul": dict(simultaneous=True),
        "wo-ESM": dict(two_stage=True, esm=False),
        "wo-CB": dict(two_stage=True, convblock=False),
        "wo-Pyra": dict(two_stage=True, pyramid=False),
        "w-st": dict(two_stage=True, start_token=True),
        "w-cross": dict(two_stage=True, cross_attention=True),
    }
    if variant not in changes:
        raise ValueError(f"unknown variant {variant!r}; choose from {ABLATION_VARIANTS}")
    return base.replace(**changes[variant])


def _stage1_key(config: TrainConfig) -> str:
    d = {k: v for k, v in config.to_dict().items() if k not in _STAGE2_ONLY}
    return json.dumps(d, sort_keys=True)


@dataclass
class AblationRow:
    variant: str
    mse: float
    mae: float
    error: str | None = None


def run_ablation_suite(config: TrainConfig, dataset: SeriesDataset, variants=ABLATION_VARIANTS,
                       out_dir: str | Path | None = None) -> list[AblationRow]:
    """Train every variant with the same data and seed; failures are isolated per row.

    Variants sharing a first-stage configuration reuse one trained stage 1,
    which is what an identical seed would reproduce anyway.
    """
    variants = list(variants)
    if not variants:
        raise ValueError("no ablation variants requested")
    cache: dict[str, StageOneModel] = {}
    rows = []
    for name in variants:
        try:
            cfg = variant_config(config, name)
            key = _stage1_key(cfg)
            s1 = None
            if cfg.mode != "simultaneous" and key in cache:
                s1 = StageOneModel(cfg, dataset.n_channels, dataset.n_time_features, dataset.channel_mode)
                s1.load_state_dict(cache[key].state_dict())
            sub = Path(out_dir) / name if out_dir is not None else None
            result = train(cfg, dataset, sub, stage1=s1)
            if cfg.mode != "simultaneous":
                cache.setdefault(key, result.stage1)
            rep = result.test_report
            rows.append(AblationRow(name, rep.mse, rep.mae))
        except Exception as exc:
            log.exception("ablation variant %s failed", name)
            rows.append(AblationRow(name, math.nan, math.nan, f"{type(exc).__name__}: {exc}"))
    if out_dir is not None:
        write_ablation_table(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_ablation_table(rows: list[AblationRow], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["variant,mse,mae,error"]
    for r in rows:
        lines.append(f"{r.variant},{r.mse!r},{r.mae!r},{r.error or ''}")
    path.write_text("\n".join(lines) + "\n")
    return path


__all__ = [
    "ABLATION_VARIANTS",
    "AblationRow",
    "EpochLog",
    "FreezeViolation",
    "TrainRecord",
    "TrainResult",
    "TrainingDiverged",
    "build_models",
    "epoch_lr",
    "load_trained",
    "run_ablation_suite",
    "train",
    "train_simultaneous",
    "train_stage1",
    "train_stage2",
    "variant_config",
]
