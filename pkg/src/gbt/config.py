"""Run configuration: hyper-parameters, variant flags and data source.

Config files are YAML.  Top-level sections ``model``, ``train`` and
``variant`` are flattened onto :class:`TrainConfig`; a ``data`` section maps
onto :class:`DataConfig`.  Unknown keys and invalid values raise
:class:`ConfigError` carrying the offending line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

MODES = ("two_stage", "first_only", "simultaneous")
TRAIN_SECTIONS = ("model", "train", "variant")
DATA_ROOT_ENV = "GBT_DATA_ROOT"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass
class TrainConfig:
    # windowing
    input_len: int = 96
    horizon: int = 96
    # auto-regression stage
    d_model1: int = 32
    heads1: int = 4
    n_blocks: int = 3
    n_pyramids: int = 3
    kernel_size: int = 3
    pyramid_downsample: str = "subsample"
    indivisible_input: str = "error"
    # self-regression stage
    d_model2: int = 512
    heads2: int = 8
    n_decoder_layers: int = 2
    ff_mult: int = 4
    esm_kernel: str = "pdf"
    esm_per_head: bool = False
    stage2_time_features: bool = True
    residual_head: bool = True
    start_token_len: int | None = None
    # optimisation
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.5
    dropout: float = 0.1
    max_epochs: int = 10
    patience: int = 3
    seed: int = 4321
    cache_stage1: bool = False
    # variant flags; at most one training mode may be set, none means two_stage
    two_stage: bool | None = None
    first_only: bool | None = None
    simultaneous: bool | None = None
    esm: bool = True
    convblock: bool = True
    pyramid: bool = True
    start_token: bool = False
    cross_attention: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def mode(self) -> str:
        chosen = [m for m in MODES if getattr(self, m)]
        return chosen[0] if chosen else "two_stage"

    @property
    def pyramid_levels(self) -> int:
        return self.n_pyramids if self.pyramid else 1

    @property
    def resolved_start_token_len(self) -> int:
        return self.input_len // 2 if self.start_token_len is None else self.start_token_len

    @property
    def effective_input_len(self) -> int:
        """Input length seen by the pyramid after any left padding."""
        if not self.convblock:
            return self.input_len
        m = 2**self.n_blocks
        if self.input_len % m == 0 or self.indivisible_input != "pad":
            return self.input_len
        return -(-self.input_len // m) * m

    def validate(self) -> None:
        chosen = [m for m in MODES if getattr(self, m)]
        if len(chosen) > 1:
            raise ConfigError(f"exactly one of {MODES} may be set, got {chosen}")
        positive = ("input_len", "horizon", "d_model1", "heads1", "n_blocks", "n_pyramids", "kernel_size",
                    "d_model2", "heads2", "ff_mult", "batch_size", "max_epochs", "patience")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_decoder_layers < 0:
            raise ConfigError("n_decoder_layers must be >= 0")
        if self.n_pyramids > self.n_blocks:
            raise ConfigError(f"n_pyramids ({self.n_pyramids}) cannot exceed n_blocks ({self.n_blocks})")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.d_model1 % self.heads1 or self.d_model2 % self.heads2:
            raise ConfigError("model dims must be divisible by their head counts")
        if self.pyramid_downsample not in ("subsample", "avgpool"):
            raise ConfigError(f"pyramid_downsample must be subsample or avgpool, got {self.pyramid_downsample!r}")
        if self.indivisible_input not in ("error", "pad", "reduce_depth"):
            raise ConfigError(f"indivisible_input must be error, pad or reduce_depth, got {self.indivisible_input!r}")
        if self.esm_kernel not in ("pdf", "logpdf", "kernel"):
            raise ConfigError(f"esm_kernel must be pdf, logpdf or kernel, got {self.esm_kernel!r}")
        m = 2**self.n_blocks
        if self.convblock and self.input_len % m and self.indivisible_input == "error":
            raise ConfigError(
                f"input_len {self.input_len} is not divisible by 2**n_blocks = {m}; "
                "set indivisible_input to 'pad' or 'reduce_depth'"
            )
        if self.indivisible_input == "reduce_depth" and self.convblock and self.input_len % m:
            while self.n_blocks > 1 and self.input_len % 2**self.n_blocks:
                self.n_blocks -= 1
            self.n_pyramids = min(self.n_pyramids, self.n_blocks)
        if self.start_token and not 0 <= self.resolved_start_token_len < self.input_len:
            raise ConfigError(f"start token length must be in [0, input_len), got {self.resolved_start_token_len}")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class DataConfig:
    path: str | None = None
    target: str = "OT"
    split_mode: str = "fractional"
    split: list[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    task: str = "univariate"
    channel_mode: str = "independent"
    synthetic: dict[str, Any] | None = None

    def resolved_path(self, base: Path | None = None) -> Path:
        if self.path is None:
            raise ConfigError("data.path is required unless data.synthetic is given")
        p = Path(os.path.expanduser(self.path))
        if p.is_absolute():
            return p
        root = os.environ.get(DATA_ROOT_ENV)
        if root:
            return Path(root) / p
        return (base or Path.cwd()) / p

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    train: TrainConfig
    data: DataConfig
    source: Path | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"train": self.train.to_dict(), "data": self.data.to_dict()}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _key_lines(text: str) -> dict[tuple[str, ...], int]:
    """Map each mapping key path to its 1-based line number."""
    lines: dict[tuple[str, ...], int] = {}
    root = yaml.compose(text, Loader=yaml.SafeLoader)

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = path + (str(k.value),)
                lines[key] = k.start_mark.line + 1
                walk(v, key)

    if root is not None:
        walk(root, ())
    return lines


def _build(cls, values: dict[str, Any], lines: dict[tuple[str, ...], int], section: tuple[str, ...]):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            path = next((p for p in lines if p[-1] == key and p[: len(section)] == section), None)
            raise ConfigError(f"unknown {cls.__name__} key {key!r}", lines.get(path) if path else None)
    try:
        return cls(**values)
    except ConfigError as exc:
        line = None
        for key in values:
            if key in str(exc):
                path = next((p for p in lines if p[-1] == key), None)
                line = lines.get(path) if path else None
                break
        raise ConfigError(str(exc), line) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str, source: Path | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML parse error: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None) from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping", 1)
    lines = _key_lines(text)

    train_values: dict[str, Any] = {}
    data_values: dict[str, Any] = {}
    for key, value in raw.items():
        if key == "data":
            if not isinstance(value, dict):
                raise ConfigError("data section must be a mapping", lines.get(("data",)))
            data_values = dict(value)
        elif key in TRAIN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} section must be a mapping", lines.get((key,)))
            for sub, v in value.items():
                if sub in train_values:
                    raise ConfigError(f"duplicate key {sub!r}", lines.get((key, sub)))
                train_values[sub] = v
        else:
            train_values[key] = value

    train = _build(TrainConfig, train_values, lines, ())
    data = _build(DataConfig, data_values, lines, ("data",))
    return RunConfig(train, data, source)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path)


def dump_config(run: RunConfig) -> str:
    d = run.to_dict()
    return yaml.safe_dump({"data": d["data"], **{"train": d["train"]}}, sort_keys=False)
