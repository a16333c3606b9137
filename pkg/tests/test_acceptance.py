"""End-to-end acceptance gate.

Nine criteria, one test each, every one printing a single
``criterion N (name): PASS|FAIL`` line. Each check verifies a released
behavior against an oracle computed independently inside this file (or
against a value derived in closed form); none restates constants from
the implementation under test.

The lines stream as the criteria complete (capture is tee-sys in
pyproject). The learnability criterion trains six full cells on a
generated 26-participant corpus and takes several minutes on one core.
"""

import math
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from vrfam import (
    MODEL_NAMES,
    PINS,
    WINDOW_GRID,
    LossConfig,
    Mode,
    Scenario,
    ScenarioConfig,
    build_model,
    build_report,
    build_scenario,
    ce_logit_grad,
    derive_seed,
    extract_windows,
    grid_to_jsonable,
    label_smoothed_ce,
    load_model,
    roc_auc,
    run_cell,
    run_grid,
    save_model,
    split_participants,
    synth_dataset,
    window_count,
    write_report,
    write_results_csv,
)
from vrfam.nn import (
    Add,
    BatchNorm1D,
    Concat,
    Conv1D,
    Dense,
    Flatten,
    GlobalAvgPool1D,
    MaxPool1D,
    ReLU,
    Softmax,
)

from conftest import make_trial
from test_nn import check_layer_gradients, numeric_grad, rel_err, scalar_loop_loss


@contextmanager
def criterion(n: int, name: str):
    try:
        yield
    except BaseException:
        print(f"criterion {n} ({name}): FAIL", flush=True)
        raise
    print(f"criterion {n} ({name}): PASS", flush=True)


@pytest.fixture(scope="module")
def study_dataset():
    """26 participants (13 novice, 13 experienced), full trial roster."""
    return synth_dataset(13, 7)


@pytest.fixture(scope="module")
def sweep_grid():
    """One full-axes sweep on a small corpus, plus what produced it."""
    dataset = synth_dataset(3, 21, trials_per_pin=2)
    base = ScenarioConfig(
        scenario=Scenario.HAND_TRACKING,
        pin="1379",
        classifier="mlp",
        window_len=50,
        epochs=1,
        batch_size=32,
        seed=21,
        stride=64,
        dtype="float32",
    )
    grid = run_grid(
        dataset, PINS, MODEL_NAMES, WINDOW_GRID, list(Scenario), base
    )
    return dataset, base, grid


# ---------------------------------------------------------------------------
# 1: analytic gradients of every layer kind
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_checks():
    with criterion(1, "gradient checks"):
        started = time.monotonic()
        seeds = range(10)
        worst = 0.0

        for seed in seeds:
            rng = np.random.default_rng(seed)

            layer = Dense(7, 4)
            worst = max(worst, check_layer_gradients(
                layer, (rng.normal(size=(5, 7)),), seed))

            k = [1, 2, 3, 5, 8][seed % 5]
            worst = max(worst, check_layer_gradients(
                Conv1D(3, 4, k), (rng.normal(size=(4, 3, 11)),), seed))

            bn = BatchNorm1D(3)
            bn.gamma[...] = rng.uniform(0.5, 1.5, size=3)
            bn.beta[...] = rng.normal(size=3)
            worst = max(worst, check_layer_gradients(
                bn, (rng.normal(size=(6, 3, 7)),), seed))

            x = rng.normal(size=(4, 3, 6))
            x[np.abs(x) < 10 * 1e-5] = 0.1  # keep probes off the kink
            worst = max(worst, check_layer_gradients(ReLU(), (x,), seed))

            # distinct values with 0.1 gaps so the argmax is probe-stable
            x = (rng.permutation(96).astype(np.float64) * 0.1 - 4.8)
            worst = max(worst, check_layer_gradients(
                MaxPool1D(3), (x.reshape(4, 2, 12),), seed))

            worst = max(worst, check_layer_gradients(
                GlobalAvgPool1D(), (rng.normal(size=(3, 4, 9)),), seed))
            worst = max(worst, check_layer_gradients(
                Flatten(), (rng.normal(size=(3, 2, 5)),), seed))
            worst = max(worst, check_layer_gradients(
                Softmax(), (rng.normal(size=(5, 3)),), seed))
            worst = max(worst, check_layer_gradients(
                Concat(), (rng.normal(size=(3, 2, 6)),
                           rng.normal(size=(3, 4, 6))), seed))
            worst = max(worst, check_layer_gradients(
                Add(), (rng.normal(size=(3, 4, 6)),
                        rng.normal(size=(3, 4, 6))), seed))

            # fused softmax + smoothed cross-entropy at the logits
            logits = rng.normal(size=(5, 2))
            labels = rng.integers(0, 2, size=5)
            cfg = LossConfig(epsilon=[0.0, 0.05, 0.1, 0.3][seed % 4])
            softmax = Softmax()

            def objective():
                return label_smoothed_ce(
                    softmax.forward(logits, mode=Mode.EVAL), labels, cfg
                )

            probs = softmax.forward(logits, mode=Mode.EVAL)
            analytic = ce_logit_grad(probs, labels, cfg)
            worst = max(worst, rel_err(analytic, numeric_grad(objective, logits)))

        elapsed = time.monotonic() - started
        assert worst < 1e-4, f"worst relative error {worst:.3e}"
        assert elapsed < 120.0, f"gradient checks took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2: loss against an independent scalar-loop oracle
# ---------------------------------------------------------------------------

def test_criterion_2_loss_oracle():
    with criterion(2, "loss oracle"):
        rng = np.random.default_rng(2024)
        for case in range(100):
            batch = int(rng.integers(1, 33))
            n_classes = 3 if case % 5 == 0 else 2
            eps = [0.0, 0.05, 0.1, 0.3][case % 4]
            probs = rng.random((batch, n_classes)) + 0.05
            probs /= probs.sum(axis=1, keepdims=True)
            labels = rng.integers(0, n_classes, size=batch)
            got = label_smoothed_ce(
                probs, labels, LossConfig(epsilon=eps, num_classes=n_classes)
            )
            want = scalar_loop_loss(probs, labels, eps, n_classes)
            assert abs(got - want) < 1e-10, f"case {case}: {got} vs {want}"

        # reference point: p=(0.2, 0.8), y=1, eps=0.05
        # -> -(0.05 ln 0.2 + 0.95 ln 0.8) = 0.2924582693702043
        probs = np.array([[0.2, 0.8]])
        got = label_smoothed_ce(probs, np.array([1]), LossConfig(epsilon=0.05))
        assert abs(got - 0.2924582693702043) < 1e-10
        got = label_smoothed_ce(probs, np.array([1]), LossConfig(epsilon=0.1))
        want = -(0.1 * math.log(0.2) + 0.9 * math.log(0.8))
        assert abs(got - want) < 1e-12


# ---------------------------------------------------------------------------
# 3: window extraction counts and content
# ---------------------------------------------------------------------------

def test_criterion_3_window_extraction():
    with criterion(3, "window extraction"):
        rng = np.random.default_rng(33)
        for case in range(1000):
            n_frames = int(rng.integers(2, 240))
            length = int(rng.integers(2, 260))
            stride = int(rng.integers(1, 40))
            trial = make_trial(n_frames, seed=case)

            starts = []
            s = 0
            while s + length <= n_frames:  # enumeration oracle
                starts.append(s)
                s += stride
            closed_form = (
                0 if n_frames < length else (n_frames - length) // stride + 1
            )
            assert len(starts) == closed_form

            windows = extract_windows(trial, length, stride)
            assert window_count(n_frames, length, stride) == closed_form
            assert len(windows) == closed_form
            for w, start in zip(windows, starts):
                assert w.origin.start_frame == start
                source = np.ascontiguousarray(
                    trial.pos[start:start + length].T
                )
                assert w.data.tobytes() == source.tobytes()


# ---------------------------------------------------------------------------
# 4: participant splits across all four scenarios
# ---------------------------------------------------------------------------

def test_criterion_4_scenario_splits(study_dataset):
    with criterion(4, "scenario splits"):
        split = split_participants(
            study_dataset.participants, 0.8, derive_seed("split", 7)
        )
        by_id = {p.id: p for p in study_dataset.participants}
        train_labels = [by_id[i].class_label for i in split.train_ids]
        test_labels = [by_id[i].class_label for i in split.test_ids]
        assert sorted(train_labels).count(0) == 10
        assert sorted(train_labels).count(1) == 10
        assert sorted(test_labels).count(0) == 3
        assert sorted(test_labels).count(1) == 3

        for scenario in Scenario:
            train_w, test_w, _ = build_scenario(
                study_dataset, scenario, "1379", 60, split, stride=30
            )
            train_pids = {w.origin.participant_id for w in train_w}
            test_pids = {w.origin.participant_id for w in test_w}
            assert train_pids and test_pids
            assert not train_pids & test_pids, scenario
            assert train_pids <= set(split.train_ids), scenario
            assert test_pids <= set(split.test_ids), scenario


# ---------------------------------------------------------------------------
# 5: full grid cardinality and schedule invariance
# ---------------------------------------------------------------------------

def test_criterion_5_grid_sweep(sweep_grid, tmp_path):
    with criterion(5, "grid sweep"):
        dataset, base, grid = sweep_grid
        assert len(grid.cells) == 384
        assert len(grid.scenarios) == 4
        assert grid.pins == PINS
        assert grid.classifiers == MODEL_NAMES
        assert grid.window_lens == WINDOW_GRID
        assert len({c.key for c in grid.cells}) == 384

        permuted = run_grid(
            dataset, PINS, MODEL_NAMES, WINDOW_GRID, list(Scenario), base,
            schedule_seed=123,
        )
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_results_csv(grid, p1)
        write_results_csv(permuted, p2)
        assert p1.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------------------
# 6: every classifier learns the real task and nothing from shuffled labels
# ---------------------------------------------------------------------------

# per-classifier budgets tuned on the generated corpus; all well under
# the 50-epoch allowance
OPERATING_POINTS = {
    "mlp": dict(epochs=12, batch_size=128),
    "fcn": dict(epochs=6, batch_size=128),
    "inception": dict(epochs=8, batch_size=64),
}


def test_criterion_6_learnability(study_dataset):
    with criterion(6, "learnability"):
        started = time.monotonic()
        for name, knobs in OPERATING_POINTS.items():
            assert knobs["epochs"] <= 50
            cfg = ScenarioConfig(
                scenario=Scenario.HAND_TRACKING,
                pin="1379",
                classifier=name,
                window_len=60,
                seed=7,
                stride=12,
                dtype="float32",
                **knobs,
            )
            real = run_cell(study_dataset, cfg)
            assert real.window_accuracy >= 0.90, (
                f"{name}: accuracy {real.window_accuracy:.4f}"
            )
            assert real.auc >= 0.95, f"{name}: auc {real.auc:.4f}"

            shuffled = run_cell(study_dataset, replace(cfg, shuffle_labels=True))
            assert 0.43 <= shuffled.window_accuracy <= 0.57, (
                f"{name} shuffled: accuracy {shuffled.window_accuracy:.4f}"
            )
            assert 0.43 <= shuffled.auc <= 0.57, (
                f"{name} shuffled: auc {shuffled.auc:.4f}"
            )
        elapsed = time.monotonic() - started
        assert elapsed <= 900.0, f"learnability checks took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# 7: AUC against brute-force pairwise comparison
# ---------------------------------------------------------------------------

def _pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_criterion_7_auc_oracle():
    with criterion(7, "auc oracle"):
        rng = np.random.default_rng(77)
        for case in range(200):
            n = int(rng.integers(2, 60))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            if case % 3 == 0:
                scores = rng.integers(0, 4, size=n) / 3.0  # heavy ties
            else:
                scores = rng.random(n)
            _, auc = roc_auc(scores, labels)
            assert abs(auc - _pairwise_auc(scores, labels)) < 1e-12

        _, auc = roc_auc([0.9, 0.4, 0.6, 0.2], [1, 0, 1, 0])
        assert abs(auc - 1.0) < 1e-12
        _, auc = roc_auc([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0])
        assert abs(auc - 0.75) < 1e-12
        _, auc = roc_auc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0])
        assert abs(auc - 0.5) < 1e-12


# ---------------------------------------------------------------------------
# 8: architecture conformance and checkpoint round trips
# ---------------------------------------------------------------------------

def test_criterion_8_architectures(tmp_path):
    with criterion(8, "architectures"):
        for length in WINDOW_GRID:
            fcn = build_model("fcn", length)
            convs = {
                n.name: n.layer for n in fcn.nodes if isinstance(n.layer, Conv1D)
            }
            assert [
                (convs[f"conv{i}"].in_channels,
                 convs[f"conv{i}"].out_channels,
                 convs[f"conv{i}"].kernel)
                for i in (1, 2, 3)
            ] == [(3, 128, 8), (128, 256, 5), (256, 128, 3)]

            mlp = build_model("mlp", length)
            dense = {
                n.name: n.layer for n in mlp.nodes if isinstance(n.layer, Dense)
            }
            hidden = (3 * length) // 2
            assert (dense["dense1"].in_dim, dense["dense1"].out_dim) == (
                3 * length, hidden)
            assert (dense["dense2"].in_dim, dense["dense2"].out_dim) == (
                hidden, hidden)
            assert (dense["logits"].in_dim, dense["logits"].out_dim) == (
                hidden, 2)

        x = np.random.default_rng(8).normal(size=(4, 3, 50))
        for name in MODEL_NAMES:
            model = build_model(name, 50, rng=np.random.default_rng(80))
            model.forward(x, mode=Mode.TRAIN)  # realistic running stats
            path = tmp_path / f"{name}.npz"
            save_model(model, path)
            restored = load_model(path)
            before = model.forward(x, mode=Mode.EVAL)
            after = restored.forward(x, mode=Mode.EVAL)
            assert before.tobytes() == after.tobytes(), name


# ---------------------------------------------------------------------------
# 9: report matrices with independently verified best markers
# ---------------------------------------------------------------------------

def test_criterion_9_report_tables(sweep_grid, tmp_path):
    with criterion(9, "report tables"):
        _, _, grid = sweep_grid
        doc = grid_to_jsonable(grid)
        tables = build_report(doc)
        assert len(tables) == 4

        cell_map = {
            (c["scenario"], c["pin"], c["classifier"], c["window_len"]): c
            for c in doc["cells"]
        }
        for table in tables:
            assert table.values.shape == (12, 8)
            assert list(table.row_labels) == [
                f"{clf} {pin}" for clf in MODEL_NAMES for pin in PINS
            ]
            for r, label in enumerate(table.row_labels):
                clf, pin = label.split()
                accs = []
                for c_i, w in enumerate(table.window_lens):
                    cell = cell_map[(table.scenario, pin, clf, w)]
                    if cell["result"] is None:
                        assert np.isnan(table.values[r, c_i])
                        accs.append(-math.inf)
                    else:
                        want = cell["result"]["window_accuracy"]
                        assert table.values[r, c_i] == want
                        accs.append(want)
                if all(a == -math.inf for a in accs):
                    assert table.best_col[r] == -1
                else:
                    assert table.best_col[r] == max(
                        range(len(accs)), key=accs.__getitem__
                    )

        written = write_report(doc, tmp_path)
        names = {p.name for p in written}
        assert {f"accuracy_{s}.csv" for s in grid.scenarios} <= names
        report_text = (tmp_path / "report.txt").read_text()
        for scenario in grid.scenarios:
            assert f"scenario: {scenario}" in report_text
        for table in tables:
            rendered = table.render().splitlines()
            for r in range(12):
                row_line = rendered[2 + r]
                marks = row_line.count("*")
                assert marks == (0 if table.best_col[r] < 0 else 1)
