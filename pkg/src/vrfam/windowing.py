"""Sliding-window extraction, participant-level splits, and the four
train/test scenarios (controller, hand tracking, cross-device, mixed).

Windows are fixed-length slices of a trial's position track, transposed to
(3, L) channels-first layout for the classifiers. Splits are made at
participant level so no person contributes windows to both sides, and
normalization statistics are always fit on the training side only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .data import ChannelStats, Dataset, Participant, Trial, fit_channel_stats, normalize

logger = logging.getLogger(__name__)

WINDOW_GRID = (50, 60, 70, 80, 90, 100, 110, 120)


class DegenerateSplit(ValueError):
    """A requested split leaves one side without both classes."""


class EmptyScenario(ValueError):
    """A scenario selection produced no train or no test windows."""


class Scenario(str, Enum):
    CONTROLLER = "controller"
    HAND_TRACKING = "hand"
    CROSS_DEVICE = "cross"
    MIXED_DEVICE = "mixed"


class WindowOrigin(NamedTuple):
    participant_id: str
    modality: str
    pin: str
    trial_index: int
    start_frame: int


@dataclass(frozen=True, eq=False)
class LabeledWindow:
    """A (3, L) slice of one trial's positions with its class label."""

    data: np.ndarray
    label: int
    origin: WindowOrigin

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != 3:
            raise ValueError(f"window data must be (3, L), got {data.shape}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    @property
    def length(self) -> int:
        return int(self.data.shape[1])


def window_count(n_frames: int, length: int, stride: int) -> int:
    """Number of full windows: (n_frames - length) // stride + 1, or 0."""
    if n_frames < length:
        return 0
    return (n_frames - length) // stride + 1


def extract_windows(
    trial: Trial, length: int, stride: int = 1, *, label: int = 0
) -> list[LabeledWindow]:
    """All full-length sliding windows of a trial, channels-first.

    A trial shorter than ``length`` yields no windows (logged, never
    padded). Each window's origin records the source trial and start frame.
    """
    if length < 2:
        raise ValueError(f"window length must be >= 2, got {length}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n = window_count(trial.n_frames, length, stride)
    if n == 0:
        logger.info(
            "skipping trial %s: %d frames < window length %d",
            trial.key, trial.n_frames, length,
        )
        return []
    windows = []
    for j in range(n):
        s = j * stride
        windows.append(
            LabeledWindow(
                data=trial.pos[s : s + length].T,
                label=label,
                origin=WindowOrigin(
                    trial.participant_id,
                    trial.modality.value,
                    trial.pin,
                    trial.trial_index,
                    s,
                ),
            )
        )
    return windows


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/test participant id sets plus the seed that made them."""

    train_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int

    def __post_init__(self) -> None:
        overlap = self.train_ids & self.test_ids
        if overlap:
            raise ValueError(f"train/test ids overlap: {sorted(overlap)}")


def split_participants(
    participants: Sequence[Participant], train_fraction: float, seed: int
) -> SplitSpec:
    """Stratified participant split.

    Within each class, ids are shuffled with the seeded generator and the
    first round(train_fraction * n) go to train (ties round toward train).
    Raises DegenerateSplit if either side of either class would be empty.
    Deterministic in the seed and invariant to input ordering.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not participants:
        raise DegenerateSplit("no participants to split")
    by_class: dict[int, list[str]] = {}
    for p in participants:
        by_class.setdefault(p.class_label, []).append(p.id)

    rng = np.random.default_rng(seed)
    train: list[str] = []
    test: list[str] = []
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        rng.shuffle(ids)
        n_train = int(np.floor(train_fraction * len(ids) + 0.5))
        if n_train == 0:
            raise DegenerateSplit(
                f"class {label}: train side empty ({len(ids)} participants "
                f"at fraction {train_fraction})"
            )
        if n_train == len(ids):
            raise DegenerateSplit(
                f"class {label}: test side empty ({len(ids)} participants "
                f"at fraction {train_fraction})"
            )
        train.extend(ids[:n_train])
        test.extend(ids[n_train:])

    return SplitSpec(
        train_ids=frozenset(train), test_ids=frozenset(test), seed=seed
    )


def _select_trials(
    trials: Sequence[Trial],
    pin: str,
    modalities: tuple[str, ...],
    participant_ids: frozenset[str] | None,
) -> list[Trial]:
    out = [
        tr
        for tr in trials
        if tr.pin == pin
        and tr.modality.value in modalities
        and (participant_ids is None or tr.participant_id in participant_ids)
    ]
    out.sort(key=lambda tr: tr.key)
    return out


def build_scenario(
    dataset: Dataset,
    scenario: Scenario,
    pin: str,
    length: int,
    split: SplitSpec,
    stride: int = 1,
    *,
    cross_test_all_participants: bool = False,
) -> tuple[list[LabeledWindow], list[LabeledWindow], ChannelStats]:
    """Assemble normalized train/test windows for one scenario cell.

    Scenario selections:
      controller  train and test on controller trials, split participants
      hand        likewise on hand-tracking trials
      cross       train on controller trials of the train participants,
                  test on hand-tracking trials of the held-out participants
                  (or of everyone, with ``cross_test_all_participants``)
      mixed       train and test on trials of both modalities

    Channel statistics are fit on the training trials only and applied to
    both sides. Raises EmptyScenario if either side ends up without
    windows.
    """
    both = (Scenario.CONTROLLER.value, Scenario.HAND_TRACKING.value)
    if scenario is Scenario.CONTROLLER:
        train_sel = ((Scenario.CONTROLLER.value,), split.train_ids)
        test_sel = ((Scenario.CONTROLLER.value,), split.test_ids)
    elif scenario is Scenario.HAND_TRACKING:
        train_sel = ((Scenario.HAND_TRACKING.value,), split.train_ids)
        test_sel = ((Scenario.HAND_TRACKING.value,), split.test_ids)
    elif scenario is Scenario.CROSS_DEVICE:
        test_ids = None if cross_test_all_participants else split.test_ids
        train_sel = ((Scenario.CONTROLLER.value,), split.train_ids)
        test_sel = ((Scenario.HAND_TRACKING.value,), test_ids)
    elif scenario is Scenario.MIXED_DEVICE:
        train_sel = (both, split.train_ids)
        test_sel = (both, split.test_ids)
    else:
        raise ValueError(f"unknown scenario {scenario!r}")

    train_trials = _select_trials(dataset.trials, pin, *train_sel)
    test_trials = _select_trials(dataset.trials, pin, *test_sel)
    if not train_trials:
        raise EmptyScenario(
            f"scenario {scenario.value}/{pin}: no training trials selected"
        )
    if not test_trials:
        raise EmptyScenario(
            f"scenario {scenario.value}/{pin}: no test trials selected"
        )

    stats = fit_channel_stats(train_trials)
    labels = {p.id: p.class_label for p in dataset.participants}

    def windows_of(trials: list[Trial]) -> list[LabeledWindow]:
        out: list[LabeledWindow] = []
        for tr in trials:
            out.extend(
                extract_windows(
                    normalize(tr, stats), length, stride,
                    label=labels[tr.participant_id],
                )
            )
        return out

    train_windows = windows_of(train_trials)
    test_windows = windows_of(test_trials)
    if not train_windows:
        raise EmptyScenario(
            f"scenario {scenario.value}/{pin}: all training trials shorter "
            f"than window length {length}"
        )
    if not test_windows:
        raise EmptyScenario(
            f"scenario {scenario.value}/{pin}: all test trials shorter "
            f"than window length {length}"
        )
    return train_windows, test_windows, stats
