"""Motion-capture data model: trial records, CSV serialization, validation,
and per-axis channel normalization.

A trial is the unit of capture: one PIN entry by one participant with one
input modality, sampled nominally at 72 fps. Positions are meters,
orientations unit quaternions in (qx, qy, qz, qw) order. All containers are
immutable after construction (arrays are copied and marked read-only), so
they are safe to share across parallel workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

NOMINAL_FPS = 72.0
PINS = ("1379", "2468", "2648", "3197")
QUAT_NORM_TOL = 1e-3
STD_FLOOR = 1e-8

FRAME_COLUMNS = (
    "participant_id", "session", "modality", "pin", "trial_index",
    "frame_idx", "t", "px", "py", "pz", "qx", "qy", "qz", "qw",
)
PARTICIPANT_COLUMNS = ("participant_id", "age", "gender", "self_rating")

FRAMES_FILENAME = "frames.csv"
PARTICIPANTS_FILENAME = "participants.csv"
META_FILENAME = "dataset_meta.json"


class MalformedRow(ValueError):
    """A CSV row that cannot be interpreted; message carries the line number."""


class DuplicateKey(ValueError):
    """Two rows or records claim the same identifying key."""


class NonMonotoneTime(ValueError):
    """Timestamps within a trial are not strictly increasing."""


class UnknownPin(ValueError):
    """PIN outside the four-combination study set."""


class EmptyInput(ValueError):
    """An operation that needs at least one sample received none."""


class Modality(str, Enum):
    CONTROLLER = "controller"
    HAND_TRACKING = "hand"


def _readonly(a: np.ndarray, shape: tuple[int, ...] | None = None) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    if shape is not None and out.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class FrameSample:
    """One 72 fps motion sample.

    The quaternion-norm invariant (|q| within 1e-3 of 1) is reported by the
    dataset validator rather than enforced here, so that imperfect captures
    can still be loaded and inspected.
    """

    t: float
    pos: np.ndarray
    orient: np.ndarray

    def __post_init__(self) -> None:
        if self.t < 0:
            raise ValueError(f"frame time must be non-negative, got {self.t}")
        object.__setattr__(self, "pos", _readonly(self.pos, (3,)))
        object.__setattr__(self, "orient", _readonly(self.orient, (4,)))

    def quat_norm(self) -> float:
        return float(np.linalg.norm(self.orient))


TrialKey = tuple[str, "Modality", str, int]


@dataclass(frozen=True, eq=False)
class Trial:
    """Ordered frame sequence for one (participant, modality, pin, attempt).

    Frames are stored packed: ``t`` is (T,), ``pos`` is (T, 3) meters,
    ``orient`` is (T, 4) quaternions. Timestamps must be strictly
    increasing; there must be at least one frame.
    """

    participant_id: str
    session: int
    modality: Modality
    pin: str
    trial_index: int
    t: np.ndarray
    pos: np.ndarray
    orient: np.ndarray

    def __post_init__(self) -> None:
        if self.pin not in PINS:
            raise UnknownPin(f"pin {self.pin!r} not in {PINS}")
        if self.session not in (1, 2):
            raise ValueError(f"session must be 1 or 2, got {self.session}")
        if not 0 <= self.trial_index <= 9:
            raise ValueError(f"trial_index must be in 0..9, got {self.trial_index}")
        t = _readonly(self.t)
        if t.ndim != 1 or t.size == 0:
            raise ValueError("trial must contain at least one frame")
        n = t.size
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "pos", _readonly(self.pos, (n, 3)))
        object.__setattr__(self, "orient", _readonly(self.orient, (n, 4)))
        if t[0] < 0:
            raise ValueError("frame times must be non-negative")
        if n > 1 and not np.all(np.diff(t) > 0):
            raise NonMonotoneTime(
                f"timestamps not strictly increasing in trial {self.key}"
            )

    @property
    def key(self) -> TrialKey:
        return (self.participant_id, self.modality, self.pin, self.trial_index)

    @property
    def n_frames(self) -> int:
        return int(self.t.size)

    def frame(self, i: int) -> FrameSample:
        return FrameSample(t=float(self.t[i]), pos=self.pos[i], orient=self.orient[i])

    def frames(self) -> Iterator[FrameSample]:
        for i in range(self.n_frames):
            yield self.frame(i)


def frames_to_trial(
    frames: Sequence[FrameSample],
    *,
    participant_id: str,
    session: int,
    modality: Modality,
    pin: str,
    trial_index: int,
) -> Trial:
    """Pack a FrameSample sequence into a Trial."""
    if not frames:
        raise ValueError("trial must contain at least one frame")
    return Trial(
        participant_id=participant_id,
        session=session,
        modality=modality,
        pin=pin,
        trial_index=trial_index,
        t=np.array([f.t for f in frames]),
        pos=np.stack([f.pos for f in frames]),
        orient=np.stack([f.orient for f in frames]),
    )


def class_label_from_rating(self_rating: int, threshold: int = 3) -> int:
    """Binary familiarity label: 1 (experienced) iff self_rating >= threshold."""
    return 1 if self_rating >= threshold else 0


@dataclass(frozen=True)
class Participant:
    id: str
    age: int
    gender: str
    self_rating: int
    class_label: int

    def __post_init__(self) -> None:
        if not 1 <= self.self_rating <= 5:
            raise ValueError(f"self_rating must be in 1..5, got {self.self_rating}")
        if self.class_label not in (0, 1):
            raise ValueError(f"class_label must be 0 or 1, got {self.class_label}")

    @classmethod
    def from_rating(
        cls, id: str, age: int, gender: str, self_rating: int, threshold: int = 3
    ) -> "Participant":
        return cls(
            id=id,
            age=age,
            gender=gender,
            self_rating=self_rating,
            class_label=class_label_from_rating(self_rating, threshold),
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Participants plus their trials.

    Construction enforces referential integrity (every trial's participant
    exists, no duplicate participants or trial keys). Completeness against
    the full 26x40x2 study shape is reported by :func:`validate`, not
    required here.
    """

    participants: tuple[Participant, ...]
    trials: tuple[Trial, ...]
    provenance: str = "real"

    def __post_init__(self) -> None:
        object.__setattr__(self, "participants", tuple(self.participants))
        object.__setattr__(self, "trials", tuple(self.trials))
        seen_p: set[str] = set()
        for p in self.participants:
            if p.id in seen_p:
                raise DuplicateKey(f"duplicate participant id {p.id!r}")
            seen_p.add(p.id)
        seen_t: set[TrialKey] = set()
        for tr in self.trials:
            if tr.key in seen_t:
                raise DuplicateKey(f"duplicate trial key {tr.key}")
            seen_t.add(tr.key)
            if tr.participant_id not in seen_p:
                raise ValueError(
                    f"trial {tr.key} references unknown participant "
                    f"{tr.participant_id!r}"
                )

    def participant_by_id(self) -> dict[str, Participant]:
        return {p.id: p for p in self.participants}


@dataclass(frozen=True)
class ChannelStats:
    """Per-axis mean and population standard deviation of positions."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _readonly(self.mean, (3,)))
        object.__setattr__(self, "std", _readonly(self.std, (3,)))
        if not np.all(self.std > 0):
            raise ValueError("std components must be positive")


def fit_channel_stats(trials: Sequence[Trial]) -> ChannelStats:
    """Per-axis mean/std over all positional samples of the given trials.

    Population convention (divide by N); std components floored at 1e-8 so
    constant channels stay usable as divisors.
    """
    if not trials or sum(t.n_frames for t in trials) == 0:
        raise EmptyInput("fit_channel_stats needs at least one frame")
    pos = np.concatenate([t.pos for t in trials], axis=0)
    mean = pos.mean(axis=0)
    std = pos.std(axis=0)  # ddof=0
    std = np.maximum(std, STD_FLOOR)
    return ChannelStats(mean=mean, std=std)


def normalize(trial: Trial, stats: ChannelStats) -> Trial:
    """Return a copy of the trial with z-scored positions.

    Timestamps and orientations are unchanged; the input trial is not
    modified.
    """
    return Trial(
        participant_id=trial.participant_id,
        session=trial.session,
        modality=trial.modality,
        pin=trial.pin,
        trial_index=trial.trial_index,
        t=trial.t,
        pos=(trial.pos - stats.mean) / stats.std,
        orient=trial.orient,
    )


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    # repr of a Python float is the shortest decimal string that parses back
    # to the same value, so write/parse round-trips are exact.
    return repr(float(x))


def resolve_dataset_paths(path: str | Path) -> tuple[Path, Path, Path]:
    """Map a dataset path (directory or frames CSV) to its component files."""
    p = Path(path)
    if p.is_dir():
        return p / FRAMES_FILENAME, p / PARTICIPANTS_FILENAME, p / META_FILENAME
    return p, p.parent / PARTICIPANTS_FILENAME, p.parent / META_FILENAME


def write_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    """Write frames.csv, participants.csv and a small provenance sidecar.

    Frame rows are sorted by (participant_id, modality, pin, trial_index,
    frame_idx); output is deterministic for a given dataset.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lines = [",".join(FRAME_COLUMNS)]
    for tr in sorted(dataset.trials, key=lambda tr: tr.key):
        head = (
            f"{tr.participant_id},{tr.session},{tr.modality.value},"
            f"{tr.pin},{tr.trial_index}"
        )
        for i in range(tr.n_frames):
            px, py, pz = tr.pos[i]
            qx, qy, qz, qw = tr.orient[i]
            lines.append(
                f"{head},{i},{_fmt(tr.t[i])},{_fmt(px)},{_fmt(py)},{_fmt(pz)},"
                f"{_fmt(qx)},{_fmt(qy)},{_fmt(qz)},{_fmt(qw)}"
            )
    (out / FRAMES_FILENAME).write_text("\n".join(lines) + "\n", encoding="utf-8")

    plines = [",".join(PARTICIPANT_COLUMNS)]
    for p in sorted(dataset.participants, key=lambda p: p.id):
        plines.append(f"{p.id},{p.age},{p.gender},{p.self_rating}")
    (out / PARTICIPANTS_FILENAME).write_text(
        "\n".join(plines) + "\n", encoding="utf-8"
    )

    meta = {"provenance": dataset.provenance}
    (out / META_FILENAME).write_text(
        json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8"
    )


def _parse_participants(path: Path, threshold: int) -> list[Participant]:
    participants: list[Participant] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if tuple(header.split(",")) != PARTICIPANT_COLUMNS:
            raise MalformedRow(f"{path}:1: bad participants header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(PARTICIPANT_COLUMNS):
                raise MalformedRow(
                    f"{path}:{lineno}: expected {len(PARTICIPANT_COLUMNS)} fields, "
                    f"got {len(parts)}"
                )
            pid, age_s, gender, rating_s = parts
            try:
                age = int(age_s)
                rating = int(rating_s)
            except ValueError as exc:
                raise MalformedRow(f"{path}:{lineno}: {exc}") from exc
            if not 1 <= rating <= 5:
                raise MalformedRow(
                    f"{path}:{lineno}: self_rating must be 1..5, got {rating}"
                )
            if pid in seen:
                raise DuplicateKey(f"{path}:{lineno}: duplicate participant {pid!r}")
            seen.add(pid)
            participants.append(
                Participant.from_rating(pid, age, gender, rating, threshold)
            )
    return participants


def parse_dataset(path: str | Path, *, rating_threshold: int = 3) -> Dataset:
    """Load a dataset from a directory (or a frames CSV with siblings).

    Rows are grouped into trials and sorted by frame index; timestamps must
    be strictly increasing within each trial. Rejects duplicate
    (participant, modality, pin, trial, frame_idx) keys and PINs outside the
    study set.
    """
    frames_path, participants_path, meta_path = resolve_dataset_paths(path)
    if not frames_path.exists():
        raise FileNotFoundError(f"no frames file at {frames_path}")
    if not participants_path.exists():
        raise FileNotFoundError(f"no participants file at {participants_path}")

    participants = _parse_participants(participants_path, rating_threshold)

    modalities = {m.value: m for m in Modality}
    RowKey = tuple[str, Modality, str, int]
    rows: dict[RowKey, dict[int, tuple]] = {}
    sessions: dict[RowKey, int] = {}

    with open(frames_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if tuple(header.split(",")) != FRAME_COLUMNS:
            raise MalformedRow(f"{frames_path}:1: bad frames header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(FRAME_COLUMNS):
                raise MalformedRow(
                    f"{frames_path}:{lineno}: expected {len(FRAME_COLUMNS)} "
                    f"fields, got {len(parts)}"
                )
            (pid, session_s, modality_s, pin, trial_s, frame_s,
             t_s, px, py, pz, qx, qy, qz, qw) = parts
            if modality_s not in modalities:
                raise MalformedRow(
                    f"{frames_path}:{lineno}: unknown modality {modality_s!r}"
                )
            if pin not in PINS:
                raise UnknownPin(f"{frames_path}:{lineno}: pin {pin!r} not in {PINS}")
            try:
                session = int(session_s)
                trial_index = int(trial_s)
                frame_idx = int(frame_s)
                values = tuple(
                    float(v) for v in (t_s, px, py, pz, qx, qy, qz, qw)
                )
            except ValueError as exc:
                raise MalformedRow(f"{frames_path}:{lineno}: {exc}") from exc
            if session not in (1, 2):
                raise MalformedRow(
                    f"{frames_path}:{lineno}: session must be 1 or 2, got {session}"
                )
            if frame_idx < 0:
                raise MalformedRow(
                    f"{frames_path}:{lineno}: negative frame_idx {frame_idx}"
                )
            key = (pid, modalities[modality_s], pin, trial_index)
            group = rows.setdefault(key, {})
            if frame_idx in group:
                raise DuplicateKey(
                    f"{frames_path}:{lineno}: duplicate frame key "
                    f"{key + (frame_idx,)}"
                )
            group[frame_idx] = values
            sessions[key] = session

    trials = []
    for key in sorted(rows):
        pid, modality, pin, trial_index = key
        group = rows[key]
        order = sorted(group)
        data = np.array([group[i] for i in order])
        trials.append(
            Trial(
                participant_id=pid,
                session=sessions[key],
                modality=modality,
                pin=pin,
                trial_index=trial_index,
                t=data[:, 0],
                pos=data[:, 1:4],
                orient=data[:, 4:8],
            )
        )

    provenance = "real"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        provenance = meta.get("provenance", "real")

    return Dataset(
        participants=tuple(participants), trials=tuple(trials), provenance=provenance
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationReport:
    """Findings from a read-only dataset scan. Nothing here raises."""

    n_participants: int
    n_trials: int
    trial_frame_counts: Mapping[TrialKey, int]
    jitter_warnings: tuple[tuple[TrialKey, int, float], ...]
    quaternion_violations: tuple[tuple[TrialKey, int, float], ...]
    missing_cells: tuple[tuple[str, Modality, str, int], ...]
    study_shape_complete: bool

    def summary(self) -> str:
        lines = [
            f"participants: {self.n_participants}",
            f"trials: {self.n_trials}",
            f"jitter warnings: {len(self.jitter_warnings)}",
            f"quaternion-norm violations: {len(self.quaternion_violations)}",
            f"missing (pin x trial) cells: {len(self.missing_cells)}",
            f"study-shape complete (26x40x2): {self.study_shape_complete}",
        ]
        return "\n".join(lines)


def validate(dataset: Dataset, *, jitter_tol: float = 0.2) -> ValidationReport:
    """Scan a dataset for soft schema violations.

    Reports per-trial frame counts, sample-spacing jitter beyond
    ``jitter_tol`` of the nominal 1/72 s, quaternion norms off unit by more
    than 1e-3, and missing (pin, trial_index) cells for every
    (participant, modality) pair that has any trials. Pure function.
    """
    nominal = 1.0 / NOMINAL_FPS
    counts: dict[TrialKey, int] = {}
    jitter: list[tuple[TrialKey, int, float]] = []
    quat: list[tuple[TrialKey, int, float]] = []

    for tr in dataset.trials:
        counts[tr.key] = tr.n_frames
        dts = np.diff(tr.t)
        bad = np.nonzero(np.abs(dts - nominal) > jitter_tol * nominal)[0]
        for i in bad:
            jitter.append((tr.key, int(i) + 1, float(dts[i])))
        norms = np.linalg.norm(tr.orient, axis=1)
        badq = np.nonzero(np.abs(norms - 1.0) > QUAT_NORM_TOL)[0]
        for i in badq:
            quat.append((tr.key, int(i), float(norms[i])))

    present: dict[tuple[str, Modality], set[tuple[str, int]]] = {}
    for tr in dataset.trials:
        present.setdefault((tr.participant_id, tr.modality), set()).add(
            (tr.pin, tr.trial_index)
        )
    missing: list[tuple[str, Modality, str, int]] = []
    for (pid, modality), cells in sorted(present.items()):
        for pin in PINS:
            for idx in range(10):
                if (pin, idx) not in cells:
                    missing.append((pid, modality, pin, idx))

    complete = (
        len(dataset.participants) == 26
        and len(dataset.trials) == 2080
        and not missing
        and all(
            (p.id, m) in present for p in dataset.participants for m in Modality
        )
    )

    return ValidationReport(
        n_participants=len(dataset.participants),
        n_trials=len(dataset.trials),
        trial_frame_counts=counts,
        jitter_warnings=tuple(jitter),
        quaternion_violations=tuple(quat),
        missing_cells=tuple(missing),
        study_shape_complete=complete,
    )
