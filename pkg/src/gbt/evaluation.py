"""Metrics, error-accumulation curves, multi-seed robustness and the zero-init diagnostic."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import tensor as T
from .data import SeriesDataset, Windows, invert_standardize
from .nn import sinusoidal_encoding


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred.data if isinstance(pred, T.Tensor) else pred, dtype=float)
    t = np.asarray(truth.data if isinstance(truth, T.Tensor) else truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if p.size == 0:
        raise ValueError("cannot score an empty prediction")
    return p, t


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def mse_t(preds, truths) -> np.ndarray:
    """Per-step MSE: average over windows (and channels) of the squared error at step t.

    Inputs are (windows, horizon) or (windows, horizon, channels).
    """
    p, t = _pair(preds, truths)
    if p.ndim < 2:
        raise ValueError(f"mse_t needs (windows, horizon[, channels]) arrays, got {p.shape}")
    sq = (p - t) ** 2
    axes = (0,) + tuple(range(2, sq.ndim))
    return sq.mean(axis=axes)


# ------------------------------------------------------------------ reports
@dataclass
class EvalReport:
    mse: float
    mae: float
    mse_t: list[float]
    windows: int
    horizon: int
    stage: str = "second"
    split: str = "test"
    mse_raw: float | None = None
    mae_raw: float | None = None
    config: dict[str, Any] = field(default_factory=dict)

    def write(self, out_dir: str | Path, prefix: str = "") -> list[Path]:
        """Emit ``metrics.csv``, ``mse_t.csv`` and ``eval_report.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / f"{prefix}metrics.csv"
        with open(metrics, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scale", "stage", "split", "horizon", "windows", "mse", "mae"])
            w.writerow(["standardized", self.stage, self.split, self.horizon, self.windows, repr(self.mse), repr(self.mae)])
            if self.mse_raw is not None:
                w.writerow(["original", self.stage, self.split, self.horizon, self.windows,
                            repr(self.mse_raw), repr(self.mae_raw)])
        curve = out / f"{prefix}mse_t.csv"
        with open(curve, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mse_t"])
            for i, v in enumerate(self.mse_t):
                w.writerow([i + 1, repr(float(v))])
        summary = out / f"{prefix}eval_report.json"
        summary.write_text(json.dumps(asdict(self), indent=2, default=str))
        return [metrics, curve, summary]


def predict_windows(stage1, stage2, windows: Windows, use_stage2: bool = True, batch_size: int = 256) -> np.ndarray:
    """Eval-mode forecasts for every window, shape (windows, horizon, C)."""
    stage1.eval()
    if stage2 is not None:
        stage2.eval()
    outs = []
    with T.no_grad():
        for start in range(0, len(windows), batch_size):
            b = windows.batch(np.arange(start, min(start + batch_size, len(windows))))
            gb = stage1(b.x, b.x_mark)
            if use_stage2 and stage2 is not None:
                gb = stage2(gb, b.y_mark, x=b.x, x_marks=b.x_mark)
            outs.append(gb.data)
    return np.concatenate(outs, axis=0)


def evaluate(stage1, stage2, dataset: SeriesDataset, input_len: int, horizon: int,
             split: str = "test", use_stage2: bool = True, config: dict | None = None) -> EvalReport:
    windows = dataset.windows(split, input_len, horizon)
    pred = predict_windows(stage1, stage2, windows, use_stage2)
    truth = windows.all().y
    raw_p = invert_standardize(pred, dataset.stats)
    raw_t = invert_standardize(truth, dataset.stats)
    return EvalReport(
        mse=mse(pred, truth),
        mae=mae(pred, truth),
        mse_t=[float(v) for v in mse_t(pred, truth)],
        windows=len(windows),
        horizon=horizon,
        stage="second" if use_stage2 and stage2 is not None else "first",
        split=split,
        mse_raw=mse(raw_p, raw_t),
        mae_raw=mae(raw_p, raw_t),
        config=config or {},
    )


# --------------------------------------------------------------- robustness
@dataclass
class RobustnessReport:
    """Mean and population standard deviation (divide by n) of per-run metrics."""

    runs: int
    seeds: list[int]
    mse: list[float]
    mae: list[float]
    mse_mean: float
    mse_std: float
    mae_mean: float
    mae_std: float
    failures: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failures

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = out / "robustness_runs.csv"
        with open(rows, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "seed", "mse", "mae"])
            for i, (s, a, b) in enumerate(zip(self.seeds, self.mse, self.mae)):
                w.writerow([i, s, repr(a), repr(b)])
            w.writerow(["mean", "", repr(self.mse_mean), repr(self.mae_mean)])
            w.writerow(["std", "", repr(self.mse_std), repr(self.mae_std)])
        summary = out / "robustness.json"
        summary.write_text(json.dumps({**asdict(self), "complete": self.complete}, indent=2))
        return [rows, summary]


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population std; both NaN for an empty list."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std(ddof=0))


def summarize_runs(seeds: Sequence[int], mse_values: Sequence[float], mae_values: Sequence[float],
                   failures: Sequence[str] = ()) -> RobustnessReport:
    m_mean, m_std = mean_std(mse_values)
    a_mean, a_std = mean_std(mae_values)
    return RobustnessReport(len(seeds), list(seeds), list(mse_values), list(mae_values),
                            m_mean, m_std, a_mean, a_std, list(failures))


def _one_run(args):
    from .trainer import train

    config, dataset, seed = args
    try:
        result = train(config.replace(seed=seed), dataset)
        return seed, result.test_report.mse, result.test_report.mae, None
    except Exception as exc:  # one failing seed must not sink the others
        return seed, math.nan, math.nan, f"seed {seed}: {type(exc).__name__}: {exc}"


def robustness(config, dataset: SeriesDataset, n_runs: int = 20, seeds: Sequence[int] | None = None,
               same_seed: bool = False, workers: int = 1) -> RobustnessReport:
    """Train and test ``n_runs`` independent sessions and aggregate test MSE/MAE.

    Seeds default to ``config.seed + i``; ``same_seed`` repeats ``config.seed``.
    """
    if n_runs < 2:
        raise ValueError(f"robustness needs at least 2 runs, got {n_runs}")
    if seeds is None:
        seeds = [config.seed] * n_runs if same_seed else [config.seed + i for i in range(n_runs)]
    if len(seeds) != n_runs:
        raise ValueError(f"{len(seeds)} seeds for {n_runs} runs")
    jobs = [(config, dataset, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_run, jobs))
    else:
        results = [_one_run(j) for j in jobs]
    ok = [r for r in results if r[3] is None]
    failures = [r[3] for r in results if r[3] is not None]
    report = summarize_runs([r[0] for r in ok], [r[1] for r in ok], [r[2] for r in ok], failures)
    report.runs = n_runs
    return report


# -------------------------------------------------------- degeneracy check
REGIMES = ("zero", "start_token", "start_token_posemb")


@dataclass
class DegeneracyReport:
    regime: str
    embed_dim: int
    start_len: int
    pred_len: int
    bias: bool
    max_abs_start_start: float
    max_abs_start_pred: float
    max_abs_pred_start: float
    max_abs_pred_pred: float
    posemb_recompute_diff: float | None
    verdict: str

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _query_key(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, bq, bk):
    q = x @ wq + (bq if bq is not None else 0.0)
    k = x @ wk + (bk if bk is not None else 0.0)
    return q, k


def zero_init_diagnostic(embed_dim: int = 16, s: int = 4, l_out: int = 4, regime: str = "zero",
                         seed: int = 0, bias: bool = False, value_channels: int = 1) -> DegeneracyReport:
    """Build a random first decoder attention layer and inspect its raw ``Q K^T``.

    The decoder input is ``s`` start-token rows followed by ``l_out`` zero rows.

    * ``zero``: the rows are latent vectors fed straight to the query/key maps.
    * ``start_token``: the rows are raw series values passed through a
      bias-free value embedding first.
    * ``start_token_posemb``: as ``start_token`` plus sinusoidal positions; the
      prediction-row scores are compared with a recomputation in which those
      rows carry position encodings only.

    The verdict is derived from the measured blocks.
    """
    if regime == "start_token_with_posemb":
        regime = "start_token_posemb"
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    rng = np.random.default_rng(seed)
    d = embed_dim
    scale = 1.0 / math.sqrt(d)
    wq = rng.uniform(-scale, scale, (d, d))
    wk = rng.uniform(-scale, scale, (d, d))
    bq = rng.uniform(-scale, scale, d) if bias else None
    bk = rng.uniform(-scale, scale, d) if bias else None

    if regime == "zero":
        x = np.vstack([rng.normal(size=(s, d)), np.zeros((l_out, d))])
    else:
        w_val = rng.uniform(-1.0, 1.0, (value_channels, d))
        raw = np.vstack([rng.normal(size=(s, value_channels)), np.zeros((l_out, value_channels))])
        x = raw @ w_val
        if regime == "start_token_posemb":
            x = x + sinusoidal_encoding(s + l_out, d)

    q, k = _query_key(x, wq, wk, bq, bk)
    scores = q @ k.T
    blocks = {
        "ss": scores[:s, :s],
        "sp": scores[:s, s:],
        "ps": scores[s:, :s],
        "pp": scores[s:, s:],
    }
    mx = {name: float(np.max(np.abs(b))) if b.size else 0.0 for name, b in blocks.items()}

    recompute_diff = None
    if regime == "start_token_posemb":
        pos = sinusoidal_encoding(s + l_out, d)
        # prediction rows carry only their position encoding
        q_pos, _ = _query_key(pos[s:], wq, wk, bq, bk)
        _, k_pos = _query_key(pos[s:], wq, wk, bq, bk)
        expected_ps = q_pos @ k[:s].T
        expected_pp = q_pos @ k_pos.T
        recompute_diff = float(max(np.max(np.abs(expected_ps - blocks["ps"])),
                                   np.max(np.abs(expected_pp - blocks["pp"]))))

    zero_blocks = mx["sp"] == 0.0 and mx["ps"] == 0.0 and mx["pp"] == 0.0
    if zero_blocks:
        verdict = "degenerate (exact zeros)"
    elif recompute_diff is not None and recompute_diff < 1e-12:
        verdict = "position-only (prediction rows carry no value information)"
    else:
        verdict = "not degenerate"
    return DegeneracyReport(regime, d, s, l_out, bias, mx["ss"], mx["sp"], mx["ps"], mx["pp"],
                            recompute_diff, verdict)
