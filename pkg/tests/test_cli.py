import csv
import json

import numpy as np
import pytest

from gbt.cli import main

CONFIG = """\
data:
  synthetic: {length: 400, seed: 3, shift_every: 100}
model:
  input_len: 16
  horizon: 8
  d_model1: 8
  heads1: 2
  n_blocks: 2
  n_pyramids: 2
  d_model2: 16
  heads2: 2
  n_decoder_layers: 1
train:
  max_epochs: 1
  lr: 0.001
  seed: 5
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(CONFIG)
    return p


def test_train_happy_path(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    assert (out / "stage1.npz").exists() and (out / "gbt.npz").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert {"gbt.npz", "stage1.npz", "train_record.json", "metrics.csv", "mse_t.csv"} <= set(manifest["files"])
    assert manifest["dataset_digest"] and manifest["config"]["train"]["seed"] == 5
    assert "test_mse=" in capsys.readouterr().out


def test_train_mutual_exclusion_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(CONFIG + "variant:\n  first_only: true\n  simultaneous: true\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "x")]) == 2
    assert "exactly one" in capsys.readouterr().err


def test_config_error_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(CONFIG + "  no_such_key: 1\n")
    assert main(["train", "--config", str(p)]) == 2
    assert "line 17" in capsys.readouterr().err


def test_rerun_same_seed_identical_losses(config, tmp_path):
    recs = []
    for name in ("a", "b"):
        assert main(["train", "--config", str(config), "--out", str(tmp_path / name), "--seed", "9"]) == 0
        rec = json.loads((tmp_path / name / "train_record.json").read_text())
        recs.append([(e["train_loss"], e["val_loss"]) for e in rec["stage1"] + rec["stage2"]])
    assert recs[0] == recs[1]


def test_variant_flag(config, tmp_path):
    out = tmp_path / "first"
    assert main(["train", "--config", str(config), "--out", str(out), "--variant", "first"]) == 0
    assert json.loads((out / "train_record.json").read_text())["mode"] == "first_only"


def test_eval_round_trip(config, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(run)]) == 0
    ev = tmp_path / "eval"
    assert main(["eval", "--config", str(config), "--checkpoint", str(run / "gbt.npz"), "--out", str(ev)]) == 0
    metrics = list(csv.DictReader(open(ev / "metrics.csv")))
    mse = float(metrics[0]["mse"])
    assert np.isfinite(mse)
    curve = [float(r["mse_t"]) for r in csv.DictReader(open(ev / "mse_t.csv"))]
    assert len(curve) == 8 and abs(np.mean(curve) - mse) < 1e-9
    trained = float(list(csv.DictReader(open(run / "metrics.csv")))[0]["mse"])
    assert mse == trained


def test_eval_horizon_mismatch_exit_2(config, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(run)]) == 0
    other = tmp_path / "other.yaml"
    other.write_text(CONFIG.replace("horizon: 8", "horizon: 4"))
    assert main(["eval", "--config", str(other), "--checkpoint", str(run / "gbt.npz")]) == 2
    assert "horizon mismatch" in capsys.readouterr().err


def test_eval_missing_checkpoint_exit_2(config, tmp_path):
    assert main(["eval", "--config", str(config), "--checkpoint", str(tmp_path / "none.npz")]) == 2


def test_ablate_eight_rows(config, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(config), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert len(rows) == 8 and [r["variant"] for r in rows][:2] == ["first", "second"]


@pytest.mark.parametrize("regime,verdict", [("zero", "degenerate (exact zeros)"),
                                            ("start_token_posemb", "position-only")])
def test_diagnose(regime, verdict, capsys, tmp_path):
    assert main(["diagnose", "--regime", regime, "--out", str(tmp_path / regime)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["verdict"].startswith(verdict)
    assert (tmp_path / regime / "diagnostic.json").exists()


def test_robust_rows(config, tmp_path, capsys):
    out = tmp_path / "rob"
    assert main(["robust", "--config", str(config), "--runs", "5", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "robustness_runs.csv")))
    assert len(rows) == 1 + 5 + 2
    assert "+/-" in capsys.readouterr().out


def test_bad_flag_exit_2():
    assert main(["diagnose", "--regime", "nonsense"]) == 2


def test_missing_data_file_exit_2(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("GBT_DATA_ROOT", raising=False)
    p = tmp_path / "c.yaml"
    p.write_text("data:\n  path: nowhere.csv\nmodel:\n  input_len: 16\n  horizon: 8\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "not found" in capsys.readouterr().err


def test_data_root_env(tmp_path, monkeypatch):
    from gbt.data import synthetic_series, write_csv

    root = tmp_path / "data"
    root.mkdir()
    write_csv(synthetic_series(400, 2, seed=1), root / "s.csv")
    before = (root / "s.csv").read_bytes()
    monkeypatch.setenv("GBT_DATA_ROOT", str(root))
    p = tmp_path / "c.yaml"
    p.write_text(CONFIG.replace("synthetic: {length: 400, seed: 3, shift_every: 100}", "path: s.csv"))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o"), "--variant", "first"]) == 0
    assert (root / "s.csv").read_bytes() == before
