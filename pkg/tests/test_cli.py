import hashlib
import io
import json
import re
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from vrfam import __version__
from vrfam.cli import main
from vrfam.nn import load_model


def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def run_dir_of(stdout) -> Path:
    m = re.search(r"^run dir: (.+)$", stdout, re.MULTILINE)
    assert m, f"no run dir line in output:\n{stdout}"
    return Path(m.group(1))


def manifest_of(run_dir) -> dict:
    return json.loads((run_dir / "manifest.json").read_text())


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


TRAIN_FLAGS = [
    "--scenario", "hand", "--pin", "1379", "--model", "mlp",
    "--epochs", "1", "--stride", "16", "--dtype", "float32",
    "--train-fraction", "0.5",
]


@pytest.fixture(scope="module")
def synth_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code, stdout, _ = run_cli(
        ["synth", "--out", str(out), "--per-class", "2",
         "--trials-per-pin", "2", "--seed", "11"]
    )
    assert code == 0
    return run_dir_of(stdout)


@pytest.fixture(scope="module")
def train_run(synth_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code, stdout, stderr = run_cli(
        ["train", "--data", str(synth_run), "--out", str(out),
         "--window", "30", *TRAIN_FLAGS]
    )
    assert code == 0, stderr
    return run_dir_of(stdout), stderr


@pytest.fixture(scope="module")
def sweep_run(synth_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    code, stdout, stderr = run_cli(
        ["sweep", "--data", str(synth_run), "--out", str(out),
         "--pins", "1379", "--models", "mlp", "--windows", "30",
         "--scenarios", "hand", "--epochs", "1", "--stride", "16",
         "--dtype", "float32", "--train-fraction", "0.5"]
    )
    assert code == 0, stderr
    return run_dir_of(stdout), stdout


# ---------------------------------------------------------------------------
# Global behavior
# ---------------------------------------------------------------------------

def test_no_command_exits_2():
    code, _, _ = run_cli([])
    assert code == 2


def test_version_flag():
    code, stdout, _ = run_cli(["--version"])
    assert code == 0
    assert __version__ in stdout


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_artifacts_and_manifest(synth_run):
    for name in ("frames.csv", "participants.csv", "dataset_meta.json"):
        assert (synth_run / name).exists()
    doc = manifest_of(synth_run)
    assert doc["command"] == "synth"
    assert doc["status"] == "completed"
    assert doc["resolved_config"]["per_class"] == 2
    assert doc["resolved_config"]["seed"] == 11
    for rel in doc["artifacts"].values():
        assert (synth_run / rel).exists()


def test_synth_same_seed_byte_identical(synth_run, tmp_path):
    code, stdout, _ = run_cli(
        ["synth", "--out", str(tmp_path), "--per-class", "2",
         "--trials-per-pin", "2", "--seed", "11"]
    )
    assert code == 0
    other = run_dir_of(stdout)
    assert other != synth_run
    for name in ("frames.csv", "participants.csv", "dataset_meta.json"):
        assert (other / name).read_bytes() == (synth_run / name).read_bytes()


def test_synth_per_class_zero_exits_2(tmp_path):
    code, _, stderr = run_cli(["synth", "--out", str(tmp_path), "--per-class", "0"])
    assert code == 2
    assert "per-class" in stderr


def test_synth_unknown_modality_exits_2(tmp_path):
    code, _, stderr = run_cli(
        ["synth", "--out", str(tmp_path), "--modalities", "gamepad"]
    )
    assert code == 2
    assert "usage error" in stderr


def test_unknown_config_key_exits_2(tmp_path):
    cfg = tmp_path / "cfg"
    cfg.write_text("bogus = 1\n")
    code, _, stderr = run_cli(
        ["synth", "--out", str(tmp_path / "o"), "--config", str(cfg)]
    )
    assert code == 2
    assert "bogus" in stderr


def test_env_seed_used_when_flag_absent(tmp_path, monkeypatch):
    monkeypatch.setenv("VRFAM_SEED", "123")
    code, stdout, _ = run_cli(
        ["synth", "--out", str(tmp_path), "--per-class", "1",
         "--trials-per-pin", "1", "--pins", "1379", "--modalities", "hand"]
    )
    assert code == 0
    doc = manifest_of(run_dir_of(stdout))
    assert doc["resolved_config"]["seed"] == 123


def test_env_seed_invalid_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("VRFAM_SEED", "lots")
    code, _, stderr = run_cli(["synth", "--out", str(tmp_path), "--per-class", "1"])
    assert code == 2
    assert "VRFAM_SEED" in stderr


def test_config_file_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg"
    cfg.write_text("# cohort size\nper_class = 3\nseed = 11\ntrials_per_pin = 1\n")
    code, stdout, _ = run_cli(
        ["synth", "--out", str(tmp_path / "a"), "--config", str(cfg),
         "--pins", "1379", "--modalities", "hand"]
    )
    assert code == 0
    rows = (run_dir_of(stdout) / "participants.csv").read_text().splitlines()
    assert len(rows) == 1 + 6  # config value: 3 per class

    code, stdout, _ = run_cli(
        ["synth", "--out", str(tmp_path / "b"), "--config", str(cfg),
         "--per-class", "2", "--pins", "1379", "--modalities", "hand"]
    )
    assert code == 0
    rows = (run_dir_of(stdout) / "participants.csv").read_text().splitlines()
    assert len(rows) == 1 + 4  # flag overrides config


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def test_train_artifacts(train_run):
    run_dir, _ = train_run
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert metrics["config"]["classifier"] == "mlp"
    assert metrics["config"]["scenario"] == "hand"
    assert metrics["config"]["epochs"] == 1
    assert len(metrics["repeats"]) == 1
    assert set(metrics["mean"]) == {"window_accuracy", "trial_accuracy", "auc"}
    model = load_model(run_dir / "checkpoint_00.npz")
    assert any(n.name == "logits" for n in model.nodes)
    roc_lines = (run_dir / "roc_00.csv").read_text().splitlines()
    assert roc_lines[0] == "fpr,tpr,threshold"
    assert len(roc_lines) > 2
    doc = manifest_of(run_dir)
    assert doc["status"] == "completed"
    assert set(doc["artifacts"]) >= {"checkpoint_00", "roc_00", "metrics"}


def test_train_warns_on_off_grid_window(train_run):
    _, stderr = train_run
    assert "outside the standard grid" in stderr


def test_train_does_not_mutate_dataset(synth_run, train_run):
    run_dir, _ = train_run
    doc = manifest_of(run_dir)
    recorded = doc["inputs"]
    for name, digest in recorded.items():
        assert sha256(synth_run / Path(name).name) == digest


def test_train_reruns_byte_identical_metrics(synth_run, train_run, tmp_path):
    run_dir, _ = train_run
    code, stdout, _ = run_cli(
        ["train", "--data", str(synth_run), "--out", str(tmp_path),
         "--window", "30", *TRAIN_FLAGS]
    )
    assert code == 0
    other = run_dir_of(stdout)
    a = json.loads((run_dir / "metrics.json").read_text())
    b = json.loads((other / "metrics.json").read_text())
    assert a == b
    assert (run_dir / "roc_00.csv").read_bytes() == (other / "roc_00.csv").read_bytes()


@pytest.fixture(scope="module")
def repeats_run(synth_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("repeats")
    code, stdout, stderr = run_cli(
        ["train", "--data", str(synth_run), "--out", str(out),
         "--window", "50", "--repeats", "2", *TRAIN_FLAGS]
    )
    assert code == 0, stderr
    return run_dir_of(stdout), stderr


def test_repeats_write_one_checkpoint_each(repeats_run):
    run_dir, stderr = repeats_run
    assert "outside the standard grid" not in stderr  # 50 is on the grid
    assert (run_dir / "checkpoint_00.npz").exists()
    assert (run_dir / "checkpoint_01.npz").exists()
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert len(metrics["repeats"]) == 2
    accs = [r["window_accuracy"] for r in metrics["repeats"]]
    assert metrics["mean"]["window_accuracy"] == pytest.approx(float(np.mean(accs)))


def test_eval_reproduces_train_metrics(repeats_run, tmp_path):
    run_dir, _ = repeats_run
    code, stdout, stderr = run_cli(
        ["eval", "--run", str(run_dir), "--out", str(tmp_path)]
    )
    assert code == 0, stderr
    eval_dir = run_dir_of(stdout)
    evaluated = json.loads((eval_dir / "eval_metrics.json").read_text())
    trained = json.loads((run_dir / "metrics.json").read_text())["repeats"]
    assert sorted(evaluated) == ["checkpoint_00", "checkpoint_01"]
    for i, name in enumerate(sorted(evaluated)):
        a = {k: v for k, v in evaluated[name].items() if k != "loss_curve"}
        b = {k: v for k, v in trained[i].items() if k != "loss_curve"}
        assert a == b
    assert "window_accuracy=" in stdout


def test_eval_without_manifest_exits_2(tmp_path):
    code, _, stderr = run_cli(
        ["eval", "--run", str(tmp_path), "--out", str(tmp_path / "o")]
    )
    assert code == 2
    assert "manifest.json" in stderr


def test_train_unknown_scenario_exits_2(synth_run, tmp_path):
    code, _, stderr = run_cli(
        ["train", "--data", str(synth_run), "--out", str(tmp_path),
         "--scenario", "warehouse", "--pin", "1379", "--model", "mlp",
         "--window", "30"]
    )
    assert code == 2
    assert "usage error" in stderr


def test_train_missing_data_exits_1(tmp_path):
    code, _, stderr = run_cli(
        ["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"),
         "--window", "30", *TRAIN_FLAGS]
    )
    assert code == 1
    assert "error: FileNotFoundError" in stderr


# ---------------------------------------------------------------------------
# sweep / report
# ---------------------------------------------------------------------------

def test_sweep_single_cell(sweep_run):
    run_dir, stdout = sweep_run
    assert "cells: 1 (1 succeeded, 0 failed)" in stdout
    lines = (run_dir / "results.csv").read_text().splitlines()
    assert len(lines) == 2
    assert lines[1].startswith("hand,1379,mlp,30,")
    assert (run_dir / "results.json").exists()
    assert manifest_of(run_dir)["status"] == "completed"


def test_sweep_all_cells_failing_exits_1(synth_run, tmp_path):
    code, stdout, _ = run_cli(
        ["sweep", "--data", str(synth_run), "--out", str(tmp_path),
         "--pins", "1379", "--models", "mlp", "--windows", "5000",
         "--scenarios", "hand", "--epochs", "1", "--stride", "16",
         "--train-fraction", "0.5"]
    )
    assert code == 1
    assert "0 succeeded, 1 failed" in stdout
    assert manifest_of(run_dir_of(stdout))["status"] == "failed"


def test_report_from_sweep_run_dir(sweep_run, tmp_path):
    run_dir, _ = sweep_run
    code, stdout, stderr = run_cli(
        ["report", "--results", str(run_dir), "--out", str(tmp_path)]
    )
    assert code == 0, stderr
    rep = run_dir_of(stdout)
    assert (rep / "accuracy_hand.csv").exists()
    assert (rep / "report.txt").exists()
    assert (rep / "roc" / "roc_hand_1379_mlp_30.csv").exists()
    text = (rep / "report.txt").read_text()
    assert "scenario: hand" in text and "WS=30" in text


def test_report_plots(sweep_run, tmp_path):
    run_dir, _ = sweep_run
    code, stdout, stderr = run_cli(
        ["report", "--results", str(run_dir), "--out", str(tmp_path), "--plots"]
    )
    assert code == 0, stderr
    rep = run_dir_of(stdout)
    assert (rep / "roc_hand.svg").exists()
    assert (rep / "loss_hand.svg").exists()
