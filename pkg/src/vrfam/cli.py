"""Command-line entry point: synth, train, eval, sweep, report.

Every artifact-producing command works inside a fresh run directory named
by UTC timestamp plus a hash of the fully resolved configuration, and
writes a manifest (resolved config, input digests, artifact paths,
timings) before the work starts and finalizes it after. Configuration
precedence is built-in defaults < config file < command-line flags; the
environment variable VRFAM_SEED overrides the default seed.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import PINS, Modality, parse_dataset, resolve_dataset_paths, validate, write_dataset
from .experiments import (
    ScenarioConfig,
    derive_seed,
    evaluate_cell,
    run_grid,
    train_cell,
    write_results_csv,
    write_results_json,
    load_results_json,
    build_report,
    write_report,
)
from .models import (
    INCEPTION_BOTTLENECK,
    INCEPTION_DEPTH,
    INCEPTION_FILTERS,
    INCEPTION_KERNELS,
    MODEL_NAMES,
)
from .nn import load_model, save_model
from .synth import EXPERT_PROFILE, NOVICE_PROFILE, MotionProfile, synth_dataset
from .windowing import Scenario, WINDOW_GRID

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

MANIFEST_NAME = "manifest.json"


class UsageError(ValueError):
    """Bad flags or config keys; mapped to exit code 2."""


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _csv_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def default_seed() -> int:
    raw = os.environ.get("VRFAM_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"VRFAM_SEED must be an integer, got {raw!r}") from exc


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Plain key=value lines; '#' starts a comment; blank lines ignored."""
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise UsageError(f"{path}:{lineno}: empty key")
        if key in entries:
            raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = value.strip()
    return entries


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


PROFILE_FIELDS = tuple(f.name for f in dataclasses.fields(MotionProfile))


class Resolver:
    """Applies defaults < config file < flags and records the result."""

    def __init__(self, args: argparse.Namespace, known_keys: set[str]) -> None:
        self.args = args
        self.config: dict[str, str] = {}
        if getattr(args, "config", None):
            self.config = parse_config_file(args.config)
            unknown = set(self.config) - known_keys
            if unknown:
                raise UsageError(
                    f"unknown config keys: {', '.join(sorted(unknown))}"
                )
        self.resolved: dict = {}

    def get(self, key: str, default, cast=None):
        value = getattr(self.args, key, None)
        if value is None and key in self.config:
            raw = self.config[key]
            if cast is bool or isinstance(default, bool):
                value = _parse_bool(raw)
            elif cast is not None:
                value = cast(raw)
            elif isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            else:
                value = raw
        if value is None:
            value = default
        self.resolved[key] = value
        return value

    def profile(self, prefix: str, base: MotionProfile) -> MotionProfile:
        overrides = {}
        for field in PROFILE_FIELDS:
            key = f"{prefix}.{field}"
            if key in self.config:
                overrides[field] = float(self.config[key])
            self.resolved[key] = overrides.get(field, getattr(base, field))
        return dataclasses.replace(base, **overrides) if overrides else base


def _config_hash(resolved: dict) -> str:
    text = json.dumps(resolved, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:8]


def make_run_dir(out_base: str | Path, resolved: dict) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    run_dir = Path(out_base) / f"{stamp}-{_config_hash(resolved)}"
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_dir


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunManifest:
    """Reproducibility record written before work starts, finalized after."""

    def __init__(self, command: str, run_dir: Path, resolved: dict,
                 inputs: dict[str, str]) -> None:
        self.path = run_dir / MANIFEST_NAME
        self.started = time.time()
        self.doc = {
            "toolkit_version": __version__,
            "command": command,
            "status": "running",
            "created_utc": datetime.now(timezone.utc).isoformat(),
            "finished_utc": None,
            "duration_seconds": None,
            "resolved_config": resolved,
            "inputs": inputs,
            "artifacts": {},
        }
        self._write()

    def _write(self) -> None:
        self.path.write_text(
            json.dumps(self.doc, indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )

    def add_artifact(self, name: str, path: Path) -> None:
        self.doc["artifacts"][name] = str(path.relative_to(self.path.parent))

    def finalize(self, status: str = "completed") -> None:
        self.doc["status"] = status
        self.doc["finished_utc"] = datetime.now(timezone.utc).isoformat()
        self.doc["duration_seconds"] = round(time.time() - self.started, 3)
        self._write()


def _dataset_digests(data_path: str | Path) -> dict[str, str]:
    frames, participants, meta = resolve_dataset_paths(data_path)
    digests = {}
    for p in (frames, participants, meta):
        if p.exists():
            digests[str(p)] = _sha256_file(p)
    return digests


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

SYNTH_KEYS = {
    "per_class", "trials_per_pin", "seed", "pins", "modalities",
} | {f"expert.{f}" for f in PROFILE_FIELDS} | {f"novice.{f}" for f in PROFILE_FIELDS}


def cmd_synth(args: argparse.Namespace) -> int:
    res = Resolver(args, SYNTH_KEYS)
    per_class = res.get("per_class", 13)
    trials_per_pin = res.get("trials_per_pin", 10)
    seed = res.get("seed", default_seed())
    pins = res.get("pins", ",".join(PINS), cast=str)
    modalities = res.get("modalities", "controller,hand", cast=str)
    expert = res.profile("expert", EXPERT_PROFILE)
    novice = res.profile("novice", NOVICE_PROFILE)

    pin_list = _csv_list(pins)
    modality_list = []
    for name in _csv_list(modalities):
        try:
            modality_list.append(Modality(name))
        except ValueError as exc:
            raise UsageError(
                f"unknown modality {name!r}; expected controller or hand"
            ) from exc

    run_dir = make_run_dir(args.out, res.resolved)
    manifest = RunManifest("synth", run_dir, res.resolved, inputs={})
    dataset = synth_dataset(
        per_class,
        seed,
        pins=pin_list,
        modalities=modality_list,
        trials_per_pin=trials_per_pin,
        expert=expert,
        novice=novice,
    )
    write_dataset(dataset, run_dir)
    report = validate(dataset)
    for name in ("frames.csv", "participants.csv", "dataset_meta.json"):
        manifest.add_artifact(name, run_dir / name)
    manifest.finalize()
    print(f"run dir: {run_dir}")
    print(report.summary())
    return EXIT_OK


TRAIN_KEYS = {
    "seed", "epochs", "batch_size", "stride", "learning_rate",
    "label_smoothing", "dtype", "train_fraction", "repeats",
    "shuffle_labels", "cross_test_all", "inception_depth",
    "inception_filters", "inception_bottleneck", "inception_kernels",
}


def _scenario_from_name(name: str) -> Scenario:
    try:
        return Scenario(name)
    except ValueError as exc:
        valid = ", ".join(s.value for s in Scenario)
        raise UsageError(f"unknown scenario {name!r}; expected one of {valid}") from exc


def _resolve_train_base(res: Resolver, scenario: str, pin: str, model: str,
                        window: int) -> ScenarioConfig:
    kernels = res.get(
        "inception_kernels", ",".join(str(k) for k in INCEPTION_KERNELS), cast=str
    )
    kernel_tuple = tuple(int(k) for k in _csv_list(str(kernels)))
    if len(kernel_tuple) != 3:
        raise UsageError(f"inception_kernels needs 3 values, got {kernels!r}")
    try:
        return ScenarioConfig(
            scenario=_scenario_from_name(scenario),
            pin=pin,
            classifier=model,
            window_len=window,
            epochs=res.get("epochs", 50),
            batch_size=res.get("batch_size", 64),
            seed=res.get("seed", default_seed()),
            stride=res.get("stride", 1),
            train_fraction=res.get("train_fraction", 0.8),
            learning_rate=res.get("learning_rate", 1e-3),
            label_smoothing=res.get("label_smoothing", 0.1),
            dtype=res.get("dtype", "float64"),
            shuffle_labels=res.get("shuffle_labels", False),
            cross_test_all_participants=res.get("cross_test_all", False),
            inception_depth=res.get("inception_depth", INCEPTION_DEPTH),
            inception_filters=res.get("inception_filters", INCEPTION_FILTERS),
            inception_bottleneck=res.get("inception_bottleneck", INCEPTION_BOTTLENECK),
            inception_kernels=kernel_tuple,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _cfg_to_dict(cfg: ScenarioConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["scenario"] = cfg.scenario.value
    doc["inception_kernels"] = list(cfg.inception_kernels)
    return doc


def _cfg_from_dict(doc: dict) -> ScenarioConfig:
    doc = dict(doc)
    doc["scenario"] = Scenario(doc["scenario"])
    doc["inception_kernels"] = tuple(doc["inception_kernels"])
    return ScenarioConfig(**doc)


def _warn_off_grid(window: int) -> None:
    if window not in WINDOW_GRID:
        print(
            f"warning: window {window} is outside the standard grid "
            f"{WINDOW_GRID}; proceeding anyway",
            file=sys.stderr,
        )


def cmd_train(args: argparse.Namespace) -> int:
    res = Resolver(args, TRAIN_KEYS)
    base = _resolve_train_base(res, args.scenario, args.pin, args.model, args.window)
    repeats = res.get("repeats", 1)
    res.resolved.update(_cfg_to_dict(base))
    res.resolved["data"] = str(args.data)
    _warn_off_grid(base.window_len)

    dataset = parse_dataset(args.data)
    run_dir = make_run_dir(args.out, res.resolved)
    manifest = RunManifest(
        "train", run_dir, res.resolved, inputs=_dataset_digests(args.data)
    )

    per_repeat = []
    for i in range(repeats):
        cfg = base if i == 0 else dataclasses.replace(
            base, split_seed_override=derive_seed("split", base.seed, i)
        )
        model, result = train_cell(dataset, cfg)
        ckpt = run_dir / f"checkpoint_{i:02d}.npz"
        save_model(model, ckpt)
        manifest.add_artifact(f"checkpoint_{i:02d}", ckpt)
        roc_path = run_dir / f"roc_{i:02d}.csv"
        with open(roc_path, "w", encoding="utf-8") as fh:
            fh.write("fpr,tpr,threshold\n")
            for f, t, thr in zip(
                result.roc.fpr, result.roc.tpr, result.roc.thresholds
            ):
                fh.write(f"{f!r},{t!r},{thr!r}\n")
        manifest.add_artifact(f"roc_{i:02d}", roc_path)
        per_repeat.append(result.to_jsonable())

    metrics = {
        "config": res.resolved,
        "repeats": per_repeat,
        "mean": {
            key: float(np.mean([r[key] for r in per_repeat]))
            for key in ("window_accuracy", "trial_accuracy", "auc")
        },
    }
    metrics_path = run_dir / "metrics.json"
    metrics_path.write_text(
        json.dumps(metrics, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    manifest.add_artifact("metrics", metrics_path)
    manifest.finalize()
    print(f"run dir: {run_dir}")
    for key, value in metrics["mean"].items():
        print(f"{key}: {value:.6f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run_dir_in = Path(args.run)
    manifest_path = run_dir_in / MANIFEST_NAME
    if not manifest_path.exists():
        raise UsageError(f"no {MANIFEST_NAME} in {run_dir_in}")
    train_doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    resolved = train_doc["resolved_config"]
    cfg_keys = {f.name for f in dataclasses.fields(ScenarioConfig)}
    base = _cfg_from_dict({k: v for k, v in resolved.items() if k in cfg_keys})
    data_path = args.data or resolved.get("data")
    if not data_path:
        raise UsageError("no --data given and the manifest records none")

    dataset = parse_dataset(data_path)
    resolved_eval = {"run": str(run_dir_in), "data": str(data_path)}
    run_dir = make_run_dir(args.out, resolved_eval)
    manifest = RunManifest(
        "eval", run_dir, resolved_eval, inputs=_dataset_digests(data_path)
    )

    checkpoints = sorted(
        (name, rel)
        for name, rel in train_doc.get("artifacts", {}).items()
        if name.startswith("checkpoint_")
    )
    if not checkpoints:
        raise UsageError(f"{manifest_path} lists no checkpoints")
    results = {}
    for i, (name, rel) in enumerate(checkpoints):
        cfg = base if i == 0 else dataclasses.replace(
            base, split_seed_override=derive_seed("split", base.seed, i)
        )
        model = load_model(run_dir_in / rel)
        results[name] = evaluate_cell(dataset, cfg, model).to_jsonable()

    metrics_path = run_dir / "eval_metrics.json"
    metrics_path.write_text(
        json.dumps(results, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    manifest.add_artifact("eval_metrics", metrics_path)
    manifest.finalize()
    print(f"run dir: {run_dir}")
    for name, doc in results.items():
        print(
            f"{name}: window_accuracy={doc['window_accuracy']:.6f} "
            f"auc={doc['auc']:.6f}"
        )
    return EXIT_OK


SWEEP_KEYS = TRAIN_KEYS - {"repeats", "shuffle_labels"} | {
    "pins", "models", "windows", "scenarios", "workers",
}


def cmd_sweep(args: argparse.Namespace) -> int:
    res = Resolver(args, SWEEP_KEYS)
    pins = _csv_list(res.get("pins", ",".join(PINS), cast=str))
    models = _csv_list(res.get("models", ",".join(MODEL_NAMES), cast=str))
    windows = [
        int(w)
        for w in _csv_list(
            res.get("windows", ",".join(str(w) for w in WINDOW_GRID), cast=str)
        )
    ]
    scenarios = [
        _scenario_from_name(s)
        for s in _csv_list(
            res.get("scenarios", ",".join(s.value for s in Scenario), cast=str)
        )
    ]
    workers = res.get("workers", 1)
    base = _resolve_train_base(
        res, scenarios[0].value, pins[0], models[0], windows[0]
    )
    res.resolved.update(_cfg_to_dict(base))
    res.resolved.update(
        {"pins": pins, "models": models, "windows": windows,
         "scenarios": [s.value for s in scenarios], "workers": workers,
         "data": str(args.data)}
    )

    dataset = parse_dataset(args.data)
    run_dir = make_run_dir(args.out, res.resolved)
    manifest = RunManifest(
        "sweep", run_dir, res.resolved, inputs=_dataset_digests(args.data)
    )
    grid = run_grid(
        dataset, pins, models, windows, scenarios, base, workers=workers
    )
    csv_path = run_dir / "results.csv"
    json_path = run_dir / "results.json"
    write_results_csv(grid, csv_path)
    write_results_json(grid, json_path)
    manifest.add_artifact("results_csv", csv_path)
    manifest.add_artifact("results_json", json_path)

    n_ok = sum(1 for c in grid.cells if c.result is not None)
    n_failed = len(grid.cells) - n_ok
    manifest.finalize("completed" if n_ok else "failed")
    print(f"run dir: {run_dir}")
    print(f"cells: {len(grid.cells)} ({n_ok} succeeded, {n_failed} failed)")
    return EXIT_OK if n_ok else EXIT_RUNTIME


def _render_plots(doc: dict, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for scenario in doc["axes"]["scenarios"]:
        cells = [
            c for c in doc["cells"]
            if c["scenario"] == scenario and c.get("result")
        ]
        if not cells:
            continue
        fig, ax = plt.subplots(figsize=(5, 5))
        for c in cells:
            roc = c["result"]["roc"]
            ax.plot(roc["fpr"], roc["tpr"], linewidth=0.8, alpha=0.6)
        ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(f"ROC, scenario {scenario}")
        path = out_dir / f"roc_{scenario}.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots(figsize=(6, 4))
        for c in cells:
            curve = c["result"]["loss_curve"]
            if curve:
                ax.plot(range(1, len(curve) + 1), curve, linewidth=0.8, alpha=0.6)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.set_title(f"loss curves, scenario {scenario}")
        path = out_dir / f"loss_{scenario}.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def cmd_report(args: argparse.Namespace) -> int:
    results_path = Path(args.results)
    if results_path.is_dir():
        results_path = results_path / "results.json"
    if not results_path.exists():
        raise UsageError(f"no results file at {results_path}")
    doc = load_results_json(results_path)

    resolved = {"results": str(results_path), "plots": bool(args.plots)}
    run_dir = make_run_dir(args.out, resolved)
    manifest = RunManifest(
        "report", run_dir, resolved,
        inputs={str(results_path): _sha256_file(results_path)},
    )
    written = write_report(doc, run_dir, tables=build_report(doc))
    if args.plots:
        written.extend(_render_plots(doc, run_dir))
    for path in written:
        manifest.add_artifact(path.name, path)
    manifest.finalize()
    print(f"run dir: {run_dir}")
    print(f"wrote {len(written)} report files")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vrfam",
        description=(
            "VR familiarity detection from PIN-entry motion trajectories: "
            "synthesize data, train and evaluate window classifiers, sweep "
            "the full configuration grid, and render reports."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--out", required=True, help="output directory base")
    synth.add_argument("--per-class", dest="per_class", type=_positive_int)
    synth.add_argument("--trials-per-pin", dest="trials_per_pin", type=_positive_int)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--pins", help="comma-separated PIN subset")
    synth.add_argument("--modalities", help="comma-separated: controller,hand")
    synth.add_argument("--config", help="key=value config file")
    synth.set_defaults(func=cmd_synth)

    def add_cell_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--epochs", type=_positive_int)
        p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
        p.add_argument("--seed", type=int)
        p.add_argument("--stride", type=_positive_int)
        p.add_argument("--lr", dest="learning_rate", type=float)
        p.add_argument("--label-smoothing", dest="label_smoothing", type=float)
        p.add_argument("--dtype", choices=("float32", "float64"))
        p.add_argument("--train-fraction", dest="train_fraction", type=float)
        p.add_argument("--config", help="key=value config file")

    train = sub.add_parser("train", help="train one scenario cell")
    train.add_argument("--data", required=True, help="dataset directory")
    train.add_argument("--out", required=True, help="output directory base")
    train.add_argument(
        "--scenario", required=True,
        help="one of " + ", ".join(s.value for s in Scenario),
    )
    train.add_argument("--pin", required=True, choices=PINS)
    train.add_argument("--model", required=True, choices=MODEL_NAMES)
    train.add_argument("--window", required=True, type=_positive_int)
    train.add_argument("--repeats", type=_positive_int)
    train.add_argument(
        "--shuffle-labels", dest="shuffle_labels", action="store_true",
        default=None, help="permute window labels (chance-level control)",
    )
    train.add_argument(
        "--cross-test-all", dest="cross_test_all", action="store_true",
        default=None,
        help="cross scenario: test on all participants, not the held-out set",
    )
    add_cell_flags(train)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="re-evaluate a saved training run")
    ev.add_argument("--run", required=True, help="training run directory")
    ev.add_argument("--data", help="dataset directory (default: from manifest)")
    ev.add_argument("--out", required=True, help="output directory base")
    ev.set_defaults(func=cmd_eval)

    sweep = sub.add_parser("sweep", help="run the configuration grid")
    sweep.add_argument("--data", required=True, help="dataset directory")
    sweep.add_argument("--out", required=True, help="output directory base")
    sweep.add_argument("--pins", help="comma-separated PINs")
    sweep.add_argument("--models", help="comma-separated classifiers")
    sweep.add_argument("--windows", help="comma-separated window lengths")
    sweep.add_argument("--scenarios", help="comma-separated scenarios")
    sweep.add_argument("--workers", type=_positive_int)
    sweep.add_argument(
        "--cross-test-all", dest="cross_test_all", action="store_true", default=None,
    )
    add_cell_flags(sweep)
    sweep.set_defaults(func=cmd_sweep)

    report = sub.add_parser("report", help="render report artifacts")
    report.add_argument(
        "--results", required=True, help="results.json or a sweep run directory"
    )
    report.add_argument("--out", required=True, help="output directory base")
    report.add_argument("--plots", action="store_true", help="also render SVG plots")
    report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
