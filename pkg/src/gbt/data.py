"""CSV ingestion, train-fitted Z-score standardisation, splits and sliding windows."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Malformed input series or an impossible split/window request."""


@dataclass(frozen=True)
class RawSeries:
    timestamps: np.ndarray  # datetime64[ns], strictly increasing
    values: np.ndarray  # (time, variates)
    variate_names: tuple[str, ...]
    target_name: str
    freq: pd.Timedelta

    @property
    def target_index(self) -> int:
        return self.variate_names.index(self.target_name)

    def __len__(self) -> int:
        return len(self.values)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values).tobytes())
        h.update(self.timestamps.astype("int64").tobytes())
        h.update(",".join(self.variate_names).encode())
        return h.hexdigest()[:16]


def load_csv(path: str | Path, target_name: str = "OT") -> RawSeries:
    """Read a benchmark CSV: a ``date`` column followed by numeric variates."""
    path = Path(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if frame.shape[1] < 2:
        raise DataError(f"{path}: need a timestamp column and at least one variate")
    names = [str(c) for c in frame.columns[1:]]
    if target_name not in names:
        raise DataError(f"{path}: target column {target_name!r} not found; available columns: {names}")

    stamps = pd.to_datetime(frame.iloc[:, 0], errors="coerce")
    if stamps.isna().any():
        row = int(np.flatnonzero(stamps.isna().to_numpy())[0])
        raise DataError(f"{path}: unparsable timestamp at row {row + 1}, column {frame.columns[0]!r}")

    values = np.empty((len(frame), len(names)))
    for j, name in enumerate(names):
        cells = frame[name].str.strip().to_numpy(dtype=str)
        try:
            values[:, j] = cells.astype(float)  # exact round-trip parsing
        except ValueError:
            bad = pd.to_numeric(pd.Series(cells), errors="coerce").isna().to_numpy()
            row = int(np.flatnonzero(bad)[0])
            raise DataError(f"{path}: unparsable value {cells[row]!r} at row {row + 1}, column {name!r}") from None

    return make_series(stamps.to_numpy(dtype="datetime64[ns]"), values, names, target_name)


def make_series(timestamps, values, variate_names, target_name: str) -> RawSeries:
    """Validate and wrap in-memory data as a :class:`RawSeries`."""
    ts = np.asarray(timestamps, dtype="datetime64[ns]")
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    names = tuple(str(n) for n in variate_names)
    if vals.shape != (len(ts), len(names)):
        raise DataError(f"values shape {vals.shape} does not match {len(ts)} stamps x {len(names)} variates")
    if target_name not in names:
        raise DataError(f"target column {target_name!r} not found; available columns: {list(names)}")
    if not np.all(np.isfinite(vals)):
        row, col = np.argwhere(~np.isfinite(vals))[0]
        raise DataError(f"missing value at row {row + 1}, column {names[col]!r}")
    if len(ts) < 2:
        raise DataError("series needs at least two timestamps")
    steps = np.diff(ts.astype("int64"))
    if np.any(steps <= 0):
        row = int(np.flatnonzero(steps <= 0)[0])
        raise DataError(f"timestamps not strictly increasing at row {row + 2}")
    if np.any(steps != steps[0]):
        row = int(np.flatnonzero(steps != steps[0])[0])
        raise DataError(f"irregular sampling interval at row {row + 2}")
    return RawSeries(ts, vals, names, target_name, pd.Timedelta(int(steps[0]), unit="ns"))


# ------------------------------------------------------------------ splits
@dataclass(frozen=True)
class SplitSpec:
    """Either fractional proportions or whole 30-day months."""

    mode: Literal["fractional", "monthly"] = "fractional"
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        if self.mode not in ("fractional", "monthly"):
            raise DataError(f"split mode must be 'fractional' or 'monthly', got {self.mode!r}")
        parts = (self.train, self.val, self.test)
        if any(p <= 0 for p in parts):
            raise DataError(f"split parts must be positive, got {parts}")
        if self.mode == "fractional" and abs(sum(parts) - 1.0) > 1e-9:
            raise DataError(f"fractions must sum to 1, got {sum(parts)}")
        if self.mode == "monthly" and any(float(p) != int(p) for p in parts):
            raise DataError(f"month counts must be whole numbers, got {parts}")


HOURS_PER_MONTH = 30 * 24


def split(series_length: int, spec: SplitSpec, freq: pd.Timedelta | None = None) -> list[range]:
    """Return contiguous train/val/test ranges.

    Fractional: train and val lengths are floored and test takes the rest.
    Monthly: a month is 30 days of samples at ``freq``; only the configured
    prefix of the series is used.
    """
    n = int(series_length)
    if spec.mode == "fractional":
        n_train = math.floor(n * spec.train)
        n_val = math.floor(n * spec.val)
        sizes = [n_train, n_val, n - n_train - n_val]
    else:
        if freq is None:
            raise DataError("monthly split needs the sampling frequency")
        per_month = pd.Timedelta(days=30) / freq
        if per_month != int(per_month):
            raise DataError(f"30-day month is not a whole number of {freq} steps")
        sizes = [int(m) * int(per_month) for m in (spec.train, spec.val, spec.test)]
        if sum(sizes) > n:
            raise DataError(f"monthly split needs {sum(sizes)} samples, series has {n}")
    if any(s <= 0 for s in sizes):
        raise DataError(f"empty split: sizes {sizes} for length {n}")
    edges = np.cumsum([0] + sizes)
    return [range(int(edges[i]), int(edges[i + 1])) for i in range(3)]


# --------------------------------------------------------- standardisation
@dataclass(frozen=True)
class StandardizeStats:
    mean: np.ndarray
    std: np.ndarray


def fit_standardize(values: np.ndarray, train: range) -> StandardizeStats:
    """Per-variate mean and population std over the training rows only."""
    block = np.asarray(values, dtype=float)[train.start : train.stop]
    if len(block) == 0:
        raise DataError("training split is empty")
    mean = block.mean(axis=0)
    std = block.std(axis=0)
    zero = np.flatnonzero(std <= 0)
    if zero.size:
        raise DataError(f"zero-variance variate at column {int(zero[0])}: constant series cannot be standardised")
    return StandardizeStats(mean, std)


def apply_standardize(values: np.ndarray, stats: StandardizeStats) -> np.ndarray:
    return (np.asarray(values, dtype=float) - stats.mean) / stats.std


def invert_standardize(values: np.ndarray, stats: StandardizeStats) -> np.ndarray:
    return np.asarray(values, dtype=float) * stats.std + stats.mean


# ----------------------------------------------------------- calendar marks
def time_features(timestamps: np.ndarray, freq: pd.Timedelta) -> np.ndarray:
    """Calendar covariates scaled to [-0.5, 0.5], coarser set for coarser sampling."""
    idx = pd.DatetimeIndex(timestamps)
    feats = []
    if freq < pd.Timedelta(hours=1):
        feats.append(idx.minute / 59.0 - 0.5)
    if freq < pd.Timedelta(days=1):
        feats.append(idx.hour / 23.0 - 0.5)
    feats.append(idx.dayofweek / 6.0 - 0.5)
    feats.append((idx.day - 1) / 30.0 - 0.5)
    feats.append((idx.dayofyear - 1) / 365.0 - 0.5)
    return np.stack([np.asarray(f, dtype=float) for f in feats], axis=1)


# ------------------------------------------------------------------ dataset
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Batch:
    x: np.ndarray  # (B, t0, C)
    x_mark: np.ndarray  # (B, t0, F)
    y: np.ndarray  # (B, horizon, C)
    y_mark: np.ndarray  # (B, horizon, F)


@dataclass
class SeriesDataset:
    """Standardised series with split borders.

    ``task="univariate"`` keeps only the target column.  ``channel_mode``
    selects how multivariate data meets the model: ``"independent"`` treats
    each variate as its own instance, ``"relevant"`` feeds them jointly.
    """

    values: np.ndarray
    marks: np.ndarray
    splits: dict[str, range]
    stats: StandardizeStats
    variate_names: tuple[str, ...]
    task: str = "univariate"
    channel_mode: str = "independent"
    digest: str = ""
    raw_values: np.ndarray = field(default=None, repr=False)

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def n_time_features(self) -> int:
        return self.marks.shape[1]

    def windows(self, split_name: str, input_len: int, horizon: int) -> Windows:
        return make_windows(self, split_name, input_len, horizon)


def build_dataset(
    raw: RawSeries,
    spec: SplitSpec,
    task: str = "univariate",
    channel_mode: str = "independent",
) -> SeriesDataset:
    if task not in ("univariate", "multivariate"):
        raise DataError(f"task must be univariate or multivariate, got {task!r}")
    if channel_mode not in ("independent", "relevant"):
        raise DataError(f"channel_mode must be independent or relevant, got {channel_mode!r}")
    ranges = split(len(raw), spec, raw.freq)
    end = ranges[-1].stop
    values = raw.values[:end]
    names = raw.variate_names
    if task == "univariate":
        values = values[:, [raw.target_index]]
        names = (raw.target_name,)
    stats = fit_standardize(values, ranges[0])
    return SeriesDataset(
        values=apply_standardize(values, stats),
        marks=time_features(raw.timestamps[:end], raw.freq),
        splits=dict(zip(SPLIT_NAMES, ranges)),
        stats=stats,
        variate_names=names,
        task=task,
        channel_mode=channel_mode,
        digest=raw.digest(),
        raw_values=values,
    )


class Windows:
    """Stride-1 window index over one split.

    Validation and test windows may draw their input from the preceding split;
    targets always lie inside the split itself.
    """

    def __init__(self, dataset: SeriesDataset, split_name: str, input_len: int, horizon: int):
        if split_name not in dataset.splits:
            raise DataError(f"unknown split {split_name!r}")
        if input_len < 1 or horizon < 1:
            raise DataError(f"input_len and horizon must be positive, got {input_len}, {horizon}")
        rng = dataset.splits[split_name]
        start = rng.start if split_name == "train" else max(0, rng.start - input_len)
        usable = rng.stop - start
        count = usable - (input_len + horizon) + 1
        if count < 1:
            raise DataError(
                f"{split_name} split of usable length {usable} cannot hold input {input_len} + horizon {horizon}"
            )
        self.dataset = dataset
        self.split_name = split_name
        self.input_len = input_len
        self.horizon = horizon
        self.start = start
        self.count = count

    def __len__(self) -> int:
        return self.count

    def bounds(self, i: int) -> tuple[range, range]:
        if not 0 <= i < self.count:
            raise IndexError(f"window {i} out of range [0, {self.count})")
        s = self.start + i
        return range(s, s + self.input_len), range(s + self.input_len, s + self.input_len + self.horizon)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        inp, tgt = self.bounds(i)
        v = self.dataset.values
        return v[inp.start : inp.stop].copy(), v[tgt.start : tgt.stop].copy()

    def batch(self, indices) -> Batch:
        idx = np.asarray(indices, dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= self.count):
            raise IndexError("window index out of range")
        base = self.start + idx[:, None]
        xi = base + np.arange(self.input_len)
        yi = base + self.input_len + np.arange(self.horizon)
        v, m = self.dataset.values, self.dataset.marks
        return Batch(v[xi], m[xi], v[yi], m[yi])

    def all(self) -> Batch:
        return self.batch(np.arange(self.count))


def make_windows(dataset: SeriesDataset, split_name: str, input_len: int, horizon: int) -> Windows:
    return Windows(dataset, split_name, input_len, horizon)


# --------------------------------------------------------------- synthetic
def synthetic_series(
    length: int = 2000,
    n_variates: int = 1,
    seed: int = 0,
    period: int = 24,
    trend: float = 0.002,
    shift_every: int = 250,
    shift_scale: float = 1.0,
    noise: float = 0.1,
    start: str = "2016-07-01 00:00:00",
) -> RawSeries:
    """Hourly non-stationary benchmark: trend + daily seasonality + random level shifts.

    The last variate is named ``OT`` and serves as the target.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=float)
    cols = []
    for c in range(n_variates):
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.5)
        season = amp * np.sin(2 * np.pi * t / period + phase) + 0.3 * amp * np.sin(2 * np.pi * t / (7 * period))
        n_shift = max(1, length // shift_every)
        levels = np.cumsum(rng.normal(0.0, shift_scale, size=n_shift + 1))
        level = levels[np.minimum(t.astype(int) // shift_every, n_shift)]
        slope = trend * rng.uniform(0.5, 1.5)
        cols.append(slope * t + season + level + rng.normal(0.0, noise, size=length))
    values = np.stack(cols, axis=1)
    names = [f"x{c}" for c in range(n_variates - 1)] + ["OT"]
    stamps = pd.date_range(start, periods=length, freq="h").to_numpy(dtype="datetime64[ns]")
    return make_series(stamps, values, names, "OT")


def write_csv(series: RawSeries, path: str | Path) -> None:
    frame = pd.DataFrame(series.values, columns=list(series.variate_names))
    frame.insert(0, "date", pd.DatetimeIndex(series.timestamps).strftime("%Y-%m-%d %H:%M:%S"))
    frame.to_csv(path, index=False)


def dataset_from_config(data_cfg, base: Path | None = None) -> SeriesDataset:
    """Build a dataset from a :class:`gbt.config.DataConfig` (CSV path or synthetic recipe)."""
    if data_cfg.synthetic is not None:
        raw = synthetic_series(**data_cfg.synthetic)
    else:
        path = data_cfg.resolved_path(base)
        if not path.exists():
            raise DataError(f"data file not found: {path}")
        raw = load_csv(path, data_cfg.target)
    parts = list(data_cfg.split)
    if len(parts) != 3:
        raise DataError(f"split needs three parts, got {parts}")
    spec = SplitSpec(data_cfg.split_mode, *parts)
    return build_dataset(raw, spec, data_cfg.task, data_cfg.channel_mode)
