"""Command-line entry point: ``gbt {train,eval,ablate,diagnose,robust}``.

Exit codes: 0 success, 1 runtime failure, 2 config or validation failure.
Each run writes into its own directory (``--out`` or
``runs/<config digest>-<timestamp>``) together with a ``manifest.json``
listing the resolved config, dataset digest, package version and every file
produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import DataError, dataset_from_config
from .evaluation import REGIMES, evaluate, robustness, zero_init_diagnostic
from .trainer import (
    ABLATION_VARIANTS,
    FreezeViolation,
    TrainingDiverged,
    load_trained,
    run_ablation_suite,
    train,
    variant_config,
)

log = logging.getLogger("gbt")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    """Invalid combination of inputs (exit code 2)."""


def artifact_version() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            version += f"+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return version


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict | None
    dataset_digest: str | None
    version: str
    out_dir: str
    files: list[str] = field(default_factory=list)
    started: str = ""
    seconds: float = 0.0

    def write(self) -> Path:
        path = Path(self.out_dir) / "manifest.json"
        root = Path(self.out_dir)
        self.files = sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file() and p != path)
        path.write_text(json.dumps(asdict(self), indent=2, default=str))
        return path


def _out_dir(args, run: RunConfig | None, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        digest = run.digest() if run is not None else command
        out = Path("runs") / f"{digest}-{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_run(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    run = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        run.train = run.train.replace(seed=args.seed)
    variant = getattr(args, "variant", None)
    if isinstance(variant, str):
        run.train = variant_config(run.train, variant)
    return run


def _dataset(run: RunConfig):
    base = run.source.parent if run.source is not None else None
    return dataset_from_config(run.data, base)


def _manifest(command, argv, run, dataset, out, started) -> RunManifest:
    return RunManifest(command, list(argv), run.to_dict() if run else None,
                       getattr(dataset, "digest", None), artifact_version(), str(out),
                       started=time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
                       seconds=time.time() - started)


# ----------------------------------------------------------------- commands
def cmd_train(args, argv) -> int:
    started = time.time()
    run = _load_run(args)
    dataset = _dataset(run)
    out = _out_dir(args, run, "train")
    result = train(run.train, dataset, out)
    result.test_report.write(out)
    if result.stage2 is not None:
        result.first_stage_report.write(out, prefix="first_")
    _manifest("train", argv, run, dataset, out, started).write()
    print(f"mode={run.train.mode} test_mse={result.test_report.mse:.6f} test_mae={result.test_report.mae:.6f}")
    print(f"artifacts: {out}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    started = time.time()
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    run = _load_run(args)
    model_cfg, stage1, stage2, meta = load_trained(args.checkpoint)
    for name in ("input_len", "horizon"):
        if getattr(model_cfg, name) != getattr(run.train, name):
            raise UsageError(f"{name} mismatch: checkpoint has {getattr(model_cfg, name)}, "
                             f"config has {getattr(run.train, name)}")
    dataset = _dataset(run)
    if dataset.n_channels != meta["n_channels"]:
        raise UsageError(f"channel mismatch: checkpoint has {meta['n_channels']}, data has {dataset.n_channels}")
    out = _out_dir(args, run, "eval")
    use2 = stage2 is not None and args.stage != "first"
    report = evaluate(stage1, stage2, dataset, model_cfg.input_len, model_cfg.horizon, args.split, use2,
                      model_cfg.to_dict())
    report.write(out)
    _manifest("eval", argv, run, dataset, out, started).write()
    print(f"stage={report.stage} split={args.split} mse={report.mse:.6f} mae={report.mae:.6f} windows={report.windows}")
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    started = time.time()
    variants = args.variant or list(ABLATION_VARIANTS)
    args.variant = None  # the roster is handled here, not as a config override
    run = _load_run(args)
    dataset = _dataset(run)
    out = _out_dir(args, run, "ablate")
    rows = run_ablation_suite(run.train, dataset, variants, out)
    _manifest("ablate", argv, run, dataset, out, started).write()
    print(f"{'variant':<10} {'mse':>10} {'mae':>10}")
    for r in rows:
        print(f"{r.variant:<10} {r.mse:>10.6f} {r.mae:>10.6f}" + (f"  FAILED: {r.error}" if r.error else ""))
    return EXIT_RUNTIME if any(r.error for r in rows) else EXIT_OK


def cmd_diagnose(args, argv) -> int:
    started = time.time()
    report = zero_init_diagnostic(args.embed_dim, args.start_len, args.pred_len, args.regime,
                                  seed=args.seed if args.seed is not None else 0, bias=args.bias)
    text = json.dumps(report.to_dict(), indent=2)
    print(text)
    if args.out:
        out = _out_dir(args, None, "diagnose")
        (out / "diagnostic.json").write_text(text)
        _manifest("diagnose", argv, None, None, out, started).write()
    return EXIT_OK


def cmd_robust(args, argv) -> int:
    started = time.time()
    run = _load_run(args)
    dataset = _dataset(run)
    out = _out_dir(args, run, "robust")
    report = robustness(run.train, dataset, args.runs, same_seed=args.same_seed, workers=args.workers)
    report.write(out)
    _manifest("robust", argv, run, dataset, out, started).write()
    for i, (s, m, a) in enumerate(zip(report.seeds, report.mse, report.mae)):
        print(f"run {i} seed={s} mse={m:.6f} mae={a:.6f}")
    print(f"mse {report.mse_mean:.6f} +/- {report.mse_std:.6f}  mae {report.mae_mean:.6f} +/- {report.mae_std:.6f}")
    for f in report.failures:
        print(f"FAILED {f}")
    return EXIT_OK if report.complete else EXIT_RUNTIME


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gbt", description="Two-stage Transformer forecaster")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant=True):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default runs/<digest>-<timestamp>)")
        if variant:
            p.add_argument("--variant", choices=ABLATION_VARIANTS, help="apply an ablation variant to the config")

    p = sub.add_parser("train", help="train the configured mode and score the test split")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint written by train (gbt.npz)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--stage", choices=("first", "second"), default="second",
                   help="score the first-stage forecast or the refined one")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation roster")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--variant", action="append", choices=ABLATION_VARIANTS,
                   help="restrict to these variants (repeatable; default all)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", help="zero-initialisation degeneracy check")
    p.add_argument("--regime", choices=REGIMES, default="zero")
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--start-len", type=int, default=4)
    p.add_argument("--pred-len", type=int, default=4)
    p.add_argument("--bias", action="store_true", help="use biased query/key projections (negative control)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("robust", help="multi-seed train/test statistics")
    common(p)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--same-seed", action="store_true", help="repeat the config seed for every run")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_robust)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (ConfigError, DataError, UsageError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FreezeViolation) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # surfaced as a runtime failure, with traceback in the log
        log.exception("unexpected failure")
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
