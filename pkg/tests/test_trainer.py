import json
import math

import numpy as np
import pytest

from gbt import tensor as T
from gbt.checkpoint import load_checkpoint, parameter_digest
from gbt.data import SeriesDataset, SplitSpec, StandardizeStats, build_dataset, synthetic_series, time_features
from gbt.evaluation import evaluate
from gbt.trainer import (
    ABLATION_VARIANTS,
    FreezeViolation,
    TrainingDiverged,
    epoch_lr,
    load_trained,
    run_ablation_suite,
    train,
    train_simultaneous,
    train_stage1,
    train_stage2,
    variant_config,
)

from conftest import small_config


def constant_dataset(n=200, value=0.0):
    stamps = np.arange("2016-07-01", n, dtype="datetime64[h]").astype("datetime64[ns]")
    values = np.full((n, 1), value)
    return SeriesDataset(values, time_features(stamps, np.timedelta64(1, "h").astype("timedelta64[ns]")),
                         {"train": range(0, 140), "val": range(140, 160), "test": range(160, 200)},
                         StandardizeStats(np.zeros(1), np.ones(1)), ("OT",), raw_values=values)


def trend_dataset(seed=0, n=600):
    raw = synthetic_series(n, 1, seed=seed, trend=0.01, shift_scale=0.0, noise=0.05)
    return build_dataset(raw, SplitSpec())


def test_lr_schedule_halves_exactly():
    cfg = small_config(lr=1e-4)
    assert [epoch_lr(cfg, e) for e in range(4)] == [1e-4, 5e-5, 2.5e-5, 1.25e-5]
    for e in range(30):
        assert epoch_lr(cfg, e) == 1e-4 * 2.0**-e


def test_recorded_lrs(tiny_dataset):
    cfg = small_config(lr=1e-4, max_epochs=3, patience=10, first_only=True)
    _, record = train_stage1(cfg, tiny_dataset)
    assert [e.lr for e in record.stage1] == [1e-4 * 2.0**-e for e in range(3)]


def test_constant_zero_target_is_learned():
    ds = constant_dataset()
    cfg = small_config(max_epochs=2, lr=1e-3, first_only=True)
    _, record = train_stage1(cfg, ds)
    assert record.stage1[-1].val_loss < 1e-3
    assert record.stage1[-1].val_loss < record.initial_val["stage1"]


def test_trend_beats_null_predictor():
    ds = trend_dataset()
    cfg = small_config(max_epochs=4, first_only=True)
    model, record = train_stage1(cfg, ds)
    va = ds.windows("val", cfg.input_len, cfg.horizon).all()
    null = float(np.mean(va.y**2))
    assert record.best_val["stage1"] < null


class TestFreeze:
    def test_digest_and_optimizer_audit(self, tiny_dataset):
        cfg = small_config(max_epochs=2)
        s1, record = train_stage1(cfg, tiny_dataset)
        before = parameter_digest(s1.state_dict())
        s2, record = train_stage2(cfg, tiny_dataset, s1, record)
        assert record.stage1_digest_before == record.stage1_digest_after == before
        assert record.freeze_held
        assert record.optimizer_param_count["stage2"] == s2.num_parameters()
        assert all(not p.requires_grad and p.grad is None for p in s1.parameters())

    def test_residual_init_matches_stage_one(self, tiny_dataset):
        cfg = small_config(max_epochs=1)
        s1, record = train_stage1(cfg, tiny_dataset)
        _, record = train_stage2(cfg, tiny_dataset, s1, record)
        a, b = record.initial_val["stage2"], record.best_val["stage1"]
        assert abs(a - b) <= 0.05 * b

    def test_cached_stage_one_gives_same_result(self, tiny_dataset):
        cfg = small_config(max_epochs=1)
        s1, _ = train_stage1(cfg, tiny_dataset)
        s2a, ra = train_stage2(cfg, tiny_dataset, s1)
        s2b, rb = train_stage2(cfg.replace(cache_stage1=True), tiny_dataset, s1)
        assert abs(ra.stage2[0].train_loss - rb.stage2[0].train_loss) < 1e-12

    def test_drift_is_detected(self, tiny_dataset, monkeypatch):
        cfg = small_config(max_epochs=1)
        s1, _ = train_stage1(cfg, tiny_dataset)
        import gbt.trainer as tr

        real = tr._fit

        def tamper(*args, **kwargs):
            out = real(*args, **kwargs)
            s1.head.bias.data[0] += 1.0
            return out

        monkeypatch.setattr(tr, "_fit", tamper)
        with pytest.raises(FreezeViolation):
            train_stage2(cfg, tiny_dataset, s1)


def test_simultaneous_touches_every_parameter(tiny_dataset):
    cfg = small_config(max_epochs=1, simultaneous=True)
    s1, s2, record = train_simultaneous(cfg, tiny_dataset)
    assert record.optimizer_param_count["joint"] == s1.num_parameters() + s2.num_parameters()
    b = tiny_dataset.windows("train", cfg.input_len, cfg.horizon).batch(np.arange(16))
    s1.train()
    s2.train()
    T.mse_loss(s2(s1(b.x, b.x_mark), b.y_mark), b.y).backward()
    dead = [n for m in (s1, s2) for n, p in m.named_parameters() if p.grad is None or not np.any(p.grad != 0)]
    assert dead == []


@pytest.mark.parametrize("mode", ["two_stage", "first_only", "simultaneous"])
def test_checkpoint_round_trip(tiny_dataset, tmp_path, mode):
    cfg = small_config(max_epochs=1, **{mode: True})
    result = train(cfg, tiny_dataset, tmp_path)
    _, meta = load_checkpoint(tmp_path / "gbt.npz")
    assert meta["mode"] == mode
    config, s1, s2, _ = load_trained(tmp_path / "gbt.npz")
    assert (s2 is None) == (mode == "first_only")
    rep = evaluate(s1, s2, tiny_dataset, config.input_len, config.horizon, "test", s2 is not None)
    assert rep.mse == result.test_report.mse
    assert json.loads((tmp_path / "train_record.json").read_text())["mode"] == mode


def test_reproducible(tiny_dataset):
    cfg = small_config(max_epochs=2, dropout=0.1)
    a, b = train(cfg, tiny_dataset), train(cfg, tiny_dataset)
    la = [e.train_loss for e in a.record.stage1 + a.record.stage2]
    lb = [e.train_loss for e in b.record.stage1 + b.record.stage2]
    assert np.max(np.abs(np.subtract(la, lb))) < 1e-9
    assert a.test_report.mse == b.test_report.mse


def test_best_val_not_worse_than_first_epoch(tiny_dataset):
    r = train(small_config(max_epochs=3), tiny_dataset).record
    assert r.best_val["stage1"] <= r.stage1[0].val_loss
    assert r.best_val["stage2"] <= r.stage2[0].val_loss


def test_divergence_aborts():
    ds = trend_dataset()
    ds.values[ds.splits["val"].start + 20] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train_stage1(small_config(max_epochs=2), ds)


def test_early_stopping_respects_patience():
    ds = constant_dataset()
    cfg = small_config(max_epochs=10, patience=1, lr=1e-2, first_only=True)
    _, record = train_stage1(cfg, ds)
    assert len(record.stage1) <= 10


class TestAblation:
    def test_variant_configs(self):
        base = small_config()
        assert variant_config(base, "first").mode == "first_only"
        assert variant_config(base, "simul").mode == "simultaneous"
        assert not variant_config(base, "wo-ESM").esm
        assert variant_config(base, "wo-Pyra").pyramid_levels == 1
        assert variant_config(base, "w-st").start_token
        with pytest.raises(ValueError):
            variant_config(base, "nope")

    def test_full_roster(self, tiny_dataset, tmp_path):
        rows = run_ablation_suite(small_config(max_epochs=1), tiny_dataset, out_dir=tmp_path)
        assert [r.variant for r in rows] == list(ABLATION_VARIANTS)
        assert all(r.error is None and math.isfinite(r.mse) for r in rows)
        by = {r.variant: r.mse for r in rows}
        assert by["first"] != by["second"]
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert lines[0] == "variant,mse,mae,error" and len(lines) == 9

    def test_wo_cb_keeps_length(self, tiny_dataset):
        from gbt.stage1 import StageOneModel

        cfg = variant_config(small_config(), "wo-CB")
        assert StageOneModel(cfg).feature_dim == (16 + 8) * 8
        assert StageOneModel(small_config()).feature_dim == 4 * 32 + 4 * 16

    def test_failures_isolated(self, tiny_dataset):
        rows = run_ablation_suite(small_config(max_epochs=1), tiny_dataset, variants=["first", "bogus"])
        assert rows[0].error is None and rows[1].error is not None

    def test_empty_roster(self, tiny_dataset):
        with pytest.raises(ValueError):
            run_ablation_suite(small_config(), tiny_dataset, variants=[])
