"""Synthetic PIN-entry trajectory generator.

Trials are built from minimum-jerk point-to-point reaches through the four
key positions of a PIN on a 3x3 keypad floating in front of the user, with
per-profile sinusoidal tremor, white positional noise, dwell pauses on each
key, and occasional overshoot-and-correct motions. Novice and expert
profiles differ in speed, speed variability, tremor, noise, and overshoot
rate, which makes the two classes separable by construction while keeping
per-class trial lengths comparable (so window counts stay balanced).

Everything is deterministic: each trial draws from its own generator seeded
by a hash of (dataset seed, participant, modality, pin, trial index), so
generation order and parallelism cannot change the output.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from math import ceil
from typing import Mapping, Sequence

import numpy as np

from .data import (
    PINS,
    Dataset,
    FrameSample,
    Modality,
    NOMINAL_FPS,
    Participant,
    Trial,
)

IDENTITY_QUAT = (0.0, 0.0, 0.0, 1.0)

# Fraction of a leg's duration spent reaching the overshot point before the
# correction segment brings the hand back to the key.
OVERSHOOT_MAIN_FRACTION = 0.75

# Controller ergonomics relative to bare-hand tracking: steadier (the device
# damps tremor) but with longer confirmation dwells. The dwell offset is
# additive so both classes gain the same expected frame count and per-class
# window counts stay balanced.
CONTROLLER_TREMOR_SCALE = 0.5
CONTROLLER_DWELL_OFFSET = 9.0


@dataclass(frozen=True)
class MotionProfile:
    """Kinematic parameters of one familiarity class.

    segment_duration_mean   seconds per key-to-key reach
    segment_duration_jitter relative half-range of uniform duration jitter
    tremor_amp              sinusoidal tremor amplitude per axis, meters
    tremor_freq             tremor frequency, Hz
    overshoot_prob          probability a reach overshoots and corrects
    overshoot_scale         overshoot distance relative to the approach
    dwell_frames_mean       mean frames spent resting on a key
    path_noise_sigma        white positional noise sigma, meters
    """

    segment_duration_mean: float
    segment_duration_jitter: float
    tremor_amp: float
    tremor_freq: float
    overshoot_prob: float
    overshoot_scale: float
    dwell_frames_mean: float
    path_noise_sigma: float

    def __post_init__(self) -> None:
        if self.segment_duration_mean <= 0:
            raise ValueError("segment_duration_mean must be positive")
        if not 0 <= self.segment_duration_jitter < 1:
            raise ValueError("segment_duration_jitter must be in [0, 1)")
        for name in ("tremor_amp", "tremor_freq", "overshoot_scale",
                     "dwell_frames_mean", "path_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.overshoot_prob <= 1:
            raise ValueError("overshoot_prob must be in [0, 1]")


EXPERT_PROFILE = MotionProfile(
    segment_duration_mean=0.45,
    segment_duration_jitter=0.0,
    tremor_amp=0.0015,
    tremor_freq=9.0,
    overshoot_prob=0.05,
    overshoot_scale=0.25,
    dwell_frames_mean=30.0,
    path_noise_sigma=0.001,
)

NOVICE_PROFILE = MotionProfile(
    segment_duration_mean=0.8,
    segment_duration_jitter=0.4,
    tremor_amp=0.006,
    tremor_freq=7.0,
    overshoot_prob=0.35,
    overshoot_scale=0.25,
    dwell_frames_mean=5.0,
    path_noise_sigma=0.004,
)


def controller_variant(profile: MotionProfile) -> MotionProfile:
    """Profile adjustment for the handheld-controller modality."""
    return replace(
        profile,
        tremor_amp=profile.tremor_amp * CONTROLLER_TREMOR_SCALE,
        dwell_frames_mean=profile.dwell_frames_mean + CONTROLLER_DWELL_OFFSET,
    )


@dataclass(frozen=True)
class KeypadLayout:
    """3x3 digit keypad on a vertical plane, plus a hand rest position."""

    key_positions: Mapping[str, tuple[float, float, float]]
    rest_position: tuple[float, float, float]

    def __post_init__(self) -> None:
        if set(self.key_positions) != set("123456789"):
            raise ValueError("keypad must define digits 1..9")
        points = [tuple(v) for v in self.key_positions.values()]
        if len(set(points)) != len(points):
            raise ValueError("keypad key positions must be pairwise distinct")

    def key(self, digit: str) -> np.ndarray:
        return np.asarray(self.key_positions[digit], dtype=np.float64)

    @property
    def rest(self) -> np.ndarray:
        return np.asarray(self.rest_position, dtype=np.float64)


def default_keypad(pitch: float = 0.06, plane_z: float = 0.5) -> KeypadLayout:
    """Digits 1..9 in reading order, centered at the origin at depth plane_z."""
    keys = {}
    for d in range(1, 10):
        row, col = divmod(d - 1, 3)
        keys[str(d)] = ((col - 1) * pitch, (1 - row) * pitch, plane_z)
    return KeypadLayout(key_positions=keys, rest_position=(0.0, -0.15, 0.30))


def minimum_jerk(tau: np.ndarray | float) -> np.ndarray | float:
    """Normalized minimum-jerk position profile 10t^3 - 15t^4 + 6t^5."""
    return tau ** 3 * (10.0 + tau * (-15.0 + 6.0 * tau))


def min_jerk_segment(
    p0: np.ndarray, p1: np.ndarray, duration: float, fps: float = NOMINAL_FPS
) -> list[FrameSample]:
    """Sample a straight minimum-jerk reach from p0 to p1.

    Samples sit at exact 1/fps spacing from t = 0 through the first sample
    at or past ``duration``, so both endpoints are hit exactly (the phase is
    clamped to 1 beyond the nominal duration). Velocity is zero at both
    ends.
    """
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    n = max(1, ceil(duration * fps))
    t = np.arange(n + 1) / fps
    tau = np.minimum(t / duration, 1.0)
    shape = minimum_jerk(tau)[:, None]
    pos = p0 + (p1 - p0) * shape
    quat = np.asarray(IDENTITY_QUAT)
    return [FrameSample(t=float(t[i]), pos=pos[i], orient=quat) for i in range(n + 1)]


def _segment_positions(p0, p1, duration, fps) -> np.ndarray:
    return np.stack([f.pos for f in min_jerk_segment(p0, p1, duration, fps)])


def _trial_seed(seed: int, participant_id: str, modality: Modality,
                pin: str, trial_index: int) -> int:
    key = f"{seed}|{participant_id}|{modality.value}|{pin}|{trial_index}"
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big")


def synth_trial(
    pin: str,
    profile: MotionProfile,
    layout: KeypadLayout,
    seed: int,
    *,
    participant_id: str = "s000",
    session: int = 1,
    modality: Modality = Modality.HAND_TRACKING,
    trial_index: int = 0,
    fps: float = NOMINAL_FPS,
) -> Trial:
    """Generate one PIN-entry trial.

    The hand starts at the layout's rest position, reaches each key of the
    pin in turn with minimum-jerk segments (occasionally overshooting and
    correcting), and dwells on every key. Tremor and white noise are added
    on top; timestamps are exact multiples of 1/fps. Deterministic in
    ``seed``.
    """
    if pin not in PINS:
        raise ValueError(f"pin {pin!r} not in {PINS}")
    rng = np.random.default_rng(seed)

    waypoints = [layout.rest] + [layout.key(d) for d in pin]
    chunks: list[np.ndarray] = [waypoints[0][None, :]]
    for start, target in zip(waypoints[:-1], waypoints[1:]):
        duration = profile.segment_duration_mean * (
            1.0 + profile.segment_duration_jitter * rng.uniform(-1.0, 1.0)
        )
        if rng.random() < profile.overshoot_prob:
            over = target + profile.overshoot_scale * rng.uniform(0.5, 1.0) * (
                target - start
            )
            main = _segment_positions(
                start, over, OVERSHOOT_MAIN_FRACTION * duration, fps
            )
            back = _segment_positions(
                over, target, (1.0 - OVERSHOOT_MAIN_FRACTION) * duration, fps
            )
            leg = np.concatenate([main[1:], back[1:]])
        else:
            leg = _segment_positions(start, target, duration, fps)[1:]
        chunks.append(leg)
        if profile.dwell_frames_mean > 0:
            dwell = max(
                1,
                int(round(rng.normal(profile.dwell_frames_mean,
                                     0.2 * profile.dwell_frames_mean))),
            )
            chunks.append(np.tile(target, (dwell, 1)))

    pos = np.concatenate(chunks)
    n = pos.shape[0]
    t = np.arange(n) / fps

    if profile.tremor_amp > 0:
        phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
        pos = pos + profile.tremor_amp * np.sin(
            2.0 * np.pi * profile.tremor_freq * t[:, None] + phase
        )
    if profile.path_noise_sigma > 0:
        pos = pos + rng.normal(0.0, profile.path_noise_sigma, size=(n, 3))

    return Trial(
        participant_id=participant_id,
        session=session,
        modality=modality,
        pin=pin,
        trial_index=trial_index,
        t=t,
        pos=pos,
        orient=np.tile(IDENTITY_QUAT, (n, 1)),
    )


def _participant_variant(profile: MotionProfile, rng: np.random.Generator) -> MotionProfile:
    # Small per-person spread so participants are not carbon copies.
    return replace(
        profile,
        segment_duration_mean=profile.segment_duration_mean * rng.uniform(0.9, 1.1),
        tremor_amp=profile.tremor_amp * rng.uniform(0.85, 1.15),
        path_noise_sigma=profile.path_noise_sigma * rng.uniform(0.85, 1.15),
    )


def synth_dataset(
    n_per_class: int,
    seed: int,
    *,
    pins: Sequence[str] = PINS,
    modalities: Sequence[Modality] = (Modality.CONTROLLER, Modality.HAND_TRACKING),
    trials_per_pin: int = 10,
    expert: MotionProfile = EXPERT_PROFILE,
    novice: MotionProfile = NOVICE_PROFILE,
    layout: KeypadLayout | None = None,
) -> Dataset:
    """Generate a full synthetic study cohort.

    ``n_per_class`` novices (self-rating 1) and experts (self-rating 5)
    each perform ``trials_per_pin`` trials per (pin, modality). The
    controller modality uses :func:`controller_variant` of each profile.
    Output is independent of generation order: every trial is seeded by a
    hash of its identifying key.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if not 1 <= trials_per_pin <= 10:
        raise ValueError(f"trials_per_pin must be in 1..10, got {trials_per_pin}")
    for pin in pins:
        if pin not in PINS:
            raise ValueError(f"pin {pin!r} not in {PINS}")
    if layout is None:
        layout = default_keypad()

    roster_rng = np.random.default_rng(
        int.from_bytes(
            hashlib.sha256(f"{seed}|roster".encode()).digest()[:8], "big"
        )
    )
    participants: list[Participant] = []
    profiles: dict[str, MotionProfile] = {}
    for i in range(2 * n_per_class):
        pid = f"s{i:03d}"
        is_expert = i >= n_per_class
        rating = 5 if is_expert else 1
        age = int(np.clip(round(roster_rng.normal(28.0, 5.0)), 19, 45))
        gender = "female" if roster_rng.random() < 0.2 else "male"
        participants.append(Participant.from_rating(pid, age, gender, rating))
        profiles[pid] = _participant_variant(
            expert if is_expert else novice, roster_rng
        )

    trials: list[Trial] = []
    for p in participants:
        for modality in modalities:
            base = profiles[p.id]
            profile = (
                controller_variant(base)
                if modality is Modality.CONTROLLER
                else base
            )
            for pin in pins:
                for idx in range(trials_per_pin):
                    trials.append(
                        synth_trial(
                            pin,
                            profile,
                            layout,
                            _trial_seed(seed, p.id, modality, pin, idx),
                            participant_id=p.id,
                            modality=modality,
                            trial_index=idx,
                        )
                    )

    return Dataset(
        participants=tuple(participants),
        trials=tuple(trials),
        provenance=f"synthetic(seed={seed})",
    )
