"""Training/evaluation orchestration: single cells, the full grid sweep,
ROC/AUC computation, and report artifacts.

A cell is one (scenario, pin, classifier, window length) combination. Every
cell derives its own rng seed from the global seed and its coordinates via
sha256, so results do not depend on execution order or worker count. The
participant split seed is derived from the global seed alone, so all cells
of one sweep share the same cohort split.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import PINS, Dataset
from .models import (
    INCEPTION_BOTTLENECK,
    INCEPTION_DEPTH,
    INCEPTION_FILTERS,
    INCEPTION_KERNELS,
    MODEL_NAMES,
    build_model,
)
from .nn import Adam, LossConfig, Mode, ce_logit_grad, label_smoothed_ce
from .windowing import (
    Scenario,
    SplitSpec,
    build_scenario,
    split_participants,
)

RESULTS_CSV_COLUMNS = (
    "scenario", "pin", "classifier", "window_len", "seed",
    "window_accuracy", "trial_accuracy", "auc",
)
RESULTS_SCHEMA_VERSION = 1
EVAL_BATCH_SIZE = 256


class SingleClassTestSet(ValueError):
    """ROC/AUC asked for on scores that contain only one class."""


def derive_seed(*parts) -> int:
    """64-bit seed from sha256 over the joined string parts."""
    key = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big")


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything one cell run depends on.

    ``seed`` is the global experiment seed; the per-cell model/shuffle seed
    and the shared participant-split seed are derived from it (see
    :func:`cell_seed` and :func:`split_seed`). ``split_seed_override`` lets
    repeat runs re-draw the cohort split.
    """

    scenario: Scenario
    pin: str
    classifier: str
    window_len: int
    epochs: int
    batch_size: int = 64
    seed: int = 0
    stride: int = 1
    train_fraction: float = 0.8
    learning_rate: float = 1e-3
    label_smoothing: float = 0.1
    dtype: str = "float64"
    shuffle_labels: bool = False
    cross_test_all_participants: bool = False
    split_seed_override: int | None = None
    inception_depth: int = INCEPTION_DEPTH
    inception_filters: int = INCEPTION_FILTERS
    inception_bottleneck: int = INCEPTION_BOTTLENECK
    inception_kernels: tuple[int, int, int] = INCEPTION_KERNELS

    def __post_init__(self) -> None:
        if self.pin not in PINS:
            raise ValueError(f"pin {self.pin!r} not in {PINS}")
        if self.classifier not in MODEL_NAMES:
            raise ValueError(
                f"classifier {self.classifier!r} not in {MODEL_NAMES}"
            )
        if self.window_len < 2:
            raise ValueError(f"window_len must be >= 2, got {self.window_len}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")

    @property
    def key(self) -> tuple[str, str, str, int]:
        return (self.scenario.value, self.pin, self.classifier, self.window_len)


def cell_seed(cfg: ScenarioConfig) -> int:
    return derive_seed(
        "cell", cfg.seed, cfg.scenario.value, cfg.pin, cfg.classifier, cfg.window_len
    )


def split_seed(cfg: ScenarioConfig) -> int:
    if cfg.split_seed_override is not None:
        return cfg.split_seed_override
    return derive_seed("split", cfg.seed)


@dataclass(frozen=True)
class RocCurve:
    """ROC points from a descending-score threshold sweep, ties grouped.

    The leading point is (0, 0) at threshold +inf; the last point is
    (1, 1) at the lowest observed score.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def __post_init__(self) -> None:
        for name in ("fpr", "tpr", "thresholds"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        if not (self.fpr.shape == self.tpr.shape == self.thresholds.shape):
            raise ValueError("fpr, tpr, thresholds must have equal length")
        if np.any(np.diff(self.fpr) < 0) or np.any(np.diff(self.tpr) < 0):
            raise ValueError("ROC coordinates must be non-decreasing")

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(scores, labels) -> tuple[RocCurve, float]:
    """ROC curve and trapezoidal AUC for class-1 scores.

    Tied scores are grouped into one threshold step, which makes the
    trapezoidal area equal to the Mann-Whitney statistic with ties counted
    one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError("scores and labels must be equal-length 1-d arrays")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise SingleClassTestSet(
            f"need both classes for ROC, got {n_pos} positive / {n_neg} negative"
        )
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    group_ends = np.nonzero(np.diff(s))[0]
    ends = np.concatenate([group_ends, [s.size - 1]])
    tp = np.cumsum(y == 1)[ends]
    fp = np.cumsum(y == 0)[ends]
    fpr = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    thresholds = np.concatenate([[np.inf], s[ends]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds), auc


@dataclass(frozen=True)
class EvalResult:
    """Metrics for one trained cell.

    ``window_accuracy`` is the primary metric; ``trial_accuracy`` is the
    supplementary majority vote over each test trial's windows. The
    confusion matrix is indexed [true][predicted] and sums to the test
    window count.
    """

    window_accuracy: float
    trial_accuracy: float
    roc: RocCurve
    auc: float
    confusion: np.ndarray
    loss_curve: tuple[float, ...]
    n_train_windows: int
    n_test_windows: int
    cell_seed: int

    def __post_init__(self) -> None:
        conf = np.asarray(self.confusion, dtype=np.int64)
        if conf.shape != (2, 2):
            raise ValueError(f"confusion must be 2x2, got {conf.shape}")
        conf.flags.writeable = False
        object.__setattr__(self, "confusion", conf)
        object.__setattr__(self, "loss_curve", tuple(self.loss_curve))
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc must be in [0, 1], got {self.auc}")
        if int(conf.sum()) != self.n_test_windows:
            raise ValueError("confusion counts must sum to the test window count")

    def to_jsonable(self) -> dict:
        return {
            "window_accuracy": self.window_accuracy,
            "trial_accuracy": self.trial_accuracy,
            "auc": self.auc,
            "confusion": self.confusion.tolist(),
            "loss_curve": list(self.loss_curve),
            "n_train_windows": self.n_train_windows,
            "n_test_windows": self.n_test_windows,
            "cell_seed": self.cell_seed,
            "roc": {
                "fpr": self.roc.fpr.tolist(),
                "tpr": self.roc.tpr.tolist(),
                "thresholds": [
                    "inf" if np.isinf(t) else t for t in self.roc.thresholds
                ],
            },
        }


def _stack_windows(windows, dtype) -> tuple[np.ndarray, np.ndarray, list]:
    x = np.stack([w.data for w in windows]).astype(dtype)
    y = np.array([w.label for w in windows], dtype=np.int64)
    origins = [w.origin for w in windows]
    return x, y, origins


def _eval_probs(model, x: np.ndarray) -> np.ndarray:
    parts = [
        model.forward(x[i : i + EVAL_BATCH_SIZE], Mode.EVAL)
        for i in range(0, x.shape[0], EVAL_BATCH_SIZE)
    ]
    return np.concatenate(parts, axis=0)


def _trial_majority_accuracy(origins, preds, labels, probs1) -> float:
    by_trial: dict[tuple, list[int]] = {}
    for i, origin in enumerate(origins):
        by_trial.setdefault(origin[:4], []).append(i)
    correct = 0
    for idx in by_trial.values():
        idx = np.asarray(idx)
        votes = preds[idx].sum()
        half = idx.size / 2.0
        if votes > half:
            pred = 1
        elif votes < half:
            pred = 0
        else:
            pred = int(probs1[idx].mean() >= 0.5)
        true = int(labels[idx].mean() >= 0.5)
        correct += int(pred == true)
    return correct / len(by_trial)


def train_cell(dataset: Dataset, cfg: ScenarioConfig):
    """Train one grid cell and return (model, EvalResult).

    Deterministic in (dataset, cfg): builds the scenario windows, trains
    for cfg.epochs over seeded shuffled mini-batches with label-smoothed
    cross-entropy and Adam, then evaluates on the test windows in Eval
    mode.
    """
    seed = cell_seed(cfg)
    split = split_participants(
        dataset.participants, cfg.train_fraction, split_seed(cfg)
    )
    train_w, test_w, _stats = build_scenario(
        dataset,
        cfg.scenario,
        cfg.pin,
        cfg.window_len,
        split,
        stride=cfg.stride,
        cross_test_all_participants=cfg.cross_test_all_participants,
    )
    dtype = np.dtype(cfg.dtype)
    x_train, y_train, _ = _stack_windows(train_w, dtype)
    x_test, y_test, test_origins = _stack_windows(test_w, dtype)

    if cfg.shuffle_labels:
        shuffle_rng = np.random.default_rng(derive_seed("labelshuffle", seed))
        y_train = shuffle_rng.permutation(y_train)
        y_test = shuffle_rng.permutation(y_test)

    model = build_model(
        cfg.classifier,
        cfg.window_len,
        dtype=dtype,
        rng=np.random.default_rng(seed),
        inception_depth=cfg.inception_depth,
        inception_filters=cfg.inception_filters,
        inception_bottleneck=cfg.inception_bottleneck,
        inception_kernels=cfg.inception_kernels,
    )
    loss_cfg = LossConfig(epsilon=cfg.label_smoothing, num_classes=2)
    optimizer = Adam(model.parameters(), learning_rate=cfg.learning_rate)
    batch_rng = np.random.default_rng(derive_seed("batches", seed))

    n = x_train.shape[0]
    loss_curve: list[float] = []
    for _epoch in range(cfg.epochs):
        perm = batch_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            probs = model.forward(x_train[idx], Mode.TRAIN)
            total += label_smoothed_ce(probs, y_train[idx], loss_cfg) * idx.size
            dlogits = ce_logit_grad(probs, y_train[idx], loss_cfg)
            model.backward(dlogits, from_node="logits")
            optimizer.step(model.gradients())
        loss_curve.append(total / n)

    probs = _eval_probs(model, x_test)
    preds = probs.argmax(axis=1)
    confusion = np.zeros((2, 2), dtype=np.int64)
    np.add.at(confusion, (y_test, preds), 1)
    window_accuracy = float(np.trace(confusion) / confusion.sum())
    roc, auc = roc_auc(probs[:, 1].astype(np.float64), y_test)
    trial_accuracy = _trial_majority_accuracy(
        test_origins, preds, y_test, probs[:, 1]
    )

    result = EvalResult(
        window_accuracy=window_accuracy,
        trial_accuracy=trial_accuracy,
        roc=roc,
        auc=auc,
        confusion=confusion,
        loss_curve=tuple(loss_curve),
        n_train_windows=int(n),
        n_test_windows=int(x_test.shape[0]),
        cell_seed=seed,
    )
    return model, result


def run_cell(dataset: Dataset, cfg: ScenarioConfig) -> EvalResult:
    """Train and evaluate one grid cell; deterministic in (dataset, cfg)."""
    _model, result = train_cell(dataset, cfg)
    return result


def evaluate_cell(dataset: Dataset, cfg: ScenarioConfig, model) -> EvalResult:
    """Evaluate an already-trained model on cfg's test windows (no training).

    Rebuilds the same split, normalization, and (if configured) label
    shuffle as :func:`train_cell`, so a loaded checkpoint reproduces its
    train-time test metrics exactly.
    """
    seed = cell_seed(cfg)
    split = split_participants(
        dataset.participants, cfg.train_fraction, split_seed(cfg)
    )
    train_w, test_w, _stats = build_scenario(
        dataset,
        cfg.scenario,
        cfg.pin,
        cfg.window_len,
        split,
        stride=cfg.stride,
        cross_test_all_participants=cfg.cross_test_all_participants,
    )
    dtype = np.dtype(cfg.dtype)
    x_test, y_test, test_origins = _stack_windows(test_w, dtype)
    if cfg.shuffle_labels:
        shuffle_rng = np.random.default_rng(derive_seed("labelshuffle", seed))
        shuffle_rng.permutation(len(train_w))  # consume the train-side draw
        y_test = shuffle_rng.permutation(y_test)
    probs = _eval_probs(model, x_test)
    preds = probs.argmax(axis=1)
    confusion = np.zeros((2, 2), dtype=np.int64)
    np.add.at(confusion, (y_test, preds), 1)
    roc, auc = roc_auc(probs[:, 1].astype(np.float64), y_test)
    return EvalResult(
        window_accuracy=float(np.trace(confusion) / confusion.sum()),
        trial_accuracy=_trial_majority_accuracy(
            test_origins, preds, y_test, probs[:, 1]
        ),
        roc=roc,
        auc=auc,
        confusion=confusion,
        loss_curve=(),
        n_train_windows=len(train_w),
        n_test_windows=int(x_test.shape[0]),
        cell_seed=seed,
    )


# ---------------------------------------------------------------------------
# Grid sweep
# ---------------------------------------------------------------------------

CellKey = tuple[str, str, str, int]


@dataclass(frozen=True)
class CellOutcome:
    """One grid cell: its config key, and either a result or an error."""

    scenario: str
    pin: str
    classifier: str
    window_len: int
    seed: int
    result: EvalResult | None
    error: str | None

    @property
    def key(self) -> CellKey:
        return (self.scenario, self.pin, self.classifier, self.window_len)


@dataclass(frozen=True)
class GridResult:
    """Sweep outcomes keyed by (scenario, pin, classifier, window_len)."""

    cells: tuple[CellOutcome, ...]
    pins: tuple[str, ...]
    classifiers: tuple[str, ...]
    window_lens: tuple[int, ...]
    scenarios: tuple[str, ...]
    global_seed: int

    def by_key(self) -> dict[CellKey, CellOutcome]:
        return {c.key: c for c in self.cells}


def _run_one(args) -> CellOutcome:
    dataset, cfg = args
    seed = cell_seed(cfg)
    try:
        result = run_cell(dataset, cfg)
        return CellOutcome(*cfg.key, seed=seed, result=result, error=None)
    except Exception as exc:  # record per-cell failures, keep sweeping
        return CellOutcome(
            *cfg.key, seed=seed, result=None, error=f"{type(exc).__name__}: {exc}"
        )


def run_grid(
    dataset: Dataset,
    pins: Sequence[str],
    classifiers: Sequence[str],
    window_lens: Sequence[int],
    scenarios: Sequence[Scenario],
    base_cfg: ScenarioConfig,
    *,
    workers: int = 1,
    schedule_seed: int | None = None,
) -> GridResult:
    """Run one cell per Cartesian-product element of the four axes.

    Per-cell failures are captured in the outcome rather than aborting the
    sweep. ``schedule_seed`` permutes execution order only; because every
    cell's rng seed is derived from its own coordinates, the assembled
    table is identical for any schedule or worker count.
    """
    if not (pins and classifiers and window_lens and scenarios):
        raise ValueError("all grid axes must be non-empty")
    cfgs = [
        replace(
            base_cfg,
            scenario=scenario,
            pin=pin,
            classifier=classifier,
            window_len=window_len,
        )
        for scenario in scenarios
        for pin in pins
        for classifier in classifiers
        for window_len in window_lens
    ]
    order = list(range(len(cfgs)))
    if schedule_seed is not None:
        np.random.default_rng(schedule_seed).shuffle(order)

    outcomes: dict[int, CellOutcome] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, outcome in zip(
                order, pool.map(_run_one, [(dataset, cfgs[i]) for i in order])
            ):
                outcomes[i] = outcome
    else:
        for i in order:
            outcomes[i] = _run_one((dataset, cfgs[i]))

    return GridResult(
        cells=tuple(outcomes[i] for i in range(len(cfgs))),
        pins=tuple(pins),
        classifiers=tuple(classifiers),
        window_lens=tuple(int(w) for w in window_lens),
        scenarios=tuple(s.value for s in scenarios),
        global_seed=base_cfg.seed,
    )


# ---------------------------------------------------------------------------
# Serialization and report
# ---------------------------------------------------------------------------

def write_results_csv(grid: GridResult, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_CSV_COLUMNS)
        for cell in grid.cells:
            if cell.result is None:
                metrics = ["", "", ""]
            else:
                metrics = [
                    repr(cell.result.window_accuracy),
                    repr(cell.result.trial_accuracy),
                    repr(cell.result.auc),
                ]
            writer.writerow(
                [cell.scenario, cell.pin, cell.classifier, cell.window_len,
                 cell.seed, *metrics]
            )


def grid_to_jsonable(grid: GridResult) -> dict:
    return {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "global_seed": grid.global_seed,
        "axes": {
            "scenarios": list(grid.scenarios),
            "pins": list(grid.pins),
            "classifiers": list(grid.classifiers),
            "window_lens": list(grid.window_lens),
        },
        "cells": [
            {
                "scenario": c.scenario,
                "pin": c.pin,
                "classifier": c.classifier,
                "window_len": c.window_len,
                "seed": c.seed,
                "error": c.error,
                "result": None if c.result is None else c.result.to_jsonable(),
            }
            for c in grid.cells
        ],
    }


def write_results_json(grid: GridResult, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(grid_to_jsonable(grid), indent=1, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_results_json(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema_version") != RESULTS_SCHEMA_VERSION:
        raise ValueError(
            f"{path}: unsupported results schema {doc.get('schema_version')!r}"
        )
    return doc


@dataclass(frozen=True)
class ReportTable:
    """One per-scenario accuracy matrix: classifier x pin rows, window cols."""

    scenario: str
    row_labels: tuple[str, ...]
    window_lens: tuple[int, ...]
    values: np.ndarray  # (rows, windows), NaN where the cell failed
    best_col: tuple[int, ...]  # -1 for all-NaN rows

    def render(self) -> str:
        width = 12
        lines = [f"scenario: {self.scenario}"]
        header = "".join(f"WS={w}".rjust(width) for w in self.window_lens)
        lines.append(f"{'':20s}{header}")
        for r, label in enumerate(self.row_labels):
            cells = []
            for c in range(len(self.window_lens)):
                v = self.values[r, c]
                text = "-" if np.isnan(v) else f"{v:.4f}"
                if c == self.best_col[r]:
                    text += "*"
                cells.append(text.rjust(width))
            lines.append(f"{label:20s}{''.join(cells)}")
        lines.append("")
        return "\n".join(lines)


def build_report(doc: Mapping) -> list[ReportTable]:
    """Per-scenario accuracy matrices from a results JSON document.

    Rows are classifier x pin in axis order, columns the window grid; the
    best window per row is marked. Mirrors the layout used to compare
    window sizes per classifier and PIN.
    """
    axes = doc["axes"]
    cell_map = {
        (c["scenario"], c["pin"], c["classifier"], c["window_len"]): c
        for c in doc["cells"]
    }
    tables = []
    window_lens = [int(w) for w in axes["window_lens"]]
    for scenario in axes["scenarios"]:
        labels = []
        rows = []
        for clf in axes["classifiers"]:
            for pin in axes["pins"]:
                labels.append(f"{clf} {pin}")
                row = []
                for w in window_lens:
                    cell = cell_map.get((scenario, pin, clf, w))
                    if cell is None or cell.get("result") is None:
                        row.append(np.nan)
                    else:
                        row.append(cell["result"]["window_accuracy"])
                rows.append(row)
        values = np.array(rows, dtype=np.float64).reshape(
            len(labels), len(window_lens)
        )
        best = []
        for r in range(values.shape[0]):
            row = values[r]
            best.append(-1 if np.all(np.isnan(row)) else int(np.nanargmax(row)))
        tables.append(
            ReportTable(
                scenario=scenario,
                row_labels=tuple(labels),
                window_lens=tuple(window_lens),
                values=values,
                best_col=tuple(best),
            )
        )
    return tables


def write_report(
    doc: Mapping, out_dir: str | Path, *, tables: list[ReportTable] | None = None
) -> list[Path]:
    """Write accuracy matrices (CSV + text) and per-cell ROC point files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if tables is None:
        tables = build_report(doc)
    written = []

    for table in tables:
        path = out / f"accuracy_{table.scenario}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["row", *[f"ws_{w}" for w in table.window_lens], "best_ws"]
            )
            for r, label in enumerate(table.row_labels):
                cells = [
                    "" if np.isnan(v) else repr(float(v)) for v in table.values[r]
                ]
                best = (
                    "" if table.best_col[r] < 0
                    else table.window_lens[table.best_col[r]]
                )
                writer.writerow([label, *cells, best])
        written.append(path)

    text = "\n".join(t.render() for t in tables)
    summary = out / "report.txt"
    summary.write_text(text, encoding="utf-8")
    written.append(summary)

    roc_dir = out / "roc"
    roc_dir.mkdir(exist_ok=True)
    for cell in doc["cells"]:
        result = cell.get("result")
        if result is None:
            continue
        name = (
            f"roc_{cell['scenario']}_{cell['pin']}_{cell['classifier']}"
            f"_{cell['window_len']}.csv"
        )
        path = roc_dir / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr", "threshold"])
            roc = result["roc"]
            for f, t, thr in zip(roc["fpr"], roc["tpr"], roc["thresholds"]):
                writer.writerow([repr(float(f)), repr(float(t)), str(thr)])
        written.append(path)
    return written
