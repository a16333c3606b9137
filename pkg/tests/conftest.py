import numpy as np
import pytest

from vrfam.data import Dataset, Modality, Participant, Trial
from vrfam.synth import synth_dataset


def make_trial(
    n_frames: int,
    *,
    participant_id: str = "p01",
    session: int = 1,
    modality: Modality = Modality.HAND_TRACKING,
    pin: str = "1379",
    trial_index: int = 0,
    seed: int = 0,
    fps: float = 72.0,
) -> Trial:
    rng = np.random.default_rng(seed)
    return Trial(
        participant_id=participant_id,
        session=session,
        modality=modality,
        pin=pin,
        trial_index=trial_index,
        t=np.arange(n_frames) / fps,
        pos=rng.normal(scale=0.1, size=(n_frames, 3)),
        orient=np.tile([0.0, 0.0, 0.0, 1.0], (n_frames, 1)),
    )


def make_dataset(
    n_per_class: int = 2,
    *,
    trials_per_participant: int = 3,
    n_frames: int = 90,
    pin: str = "1379",
    modality: Modality = Modality.HAND_TRACKING,
) -> Dataset:
    """Hand-rolled tiny dataset: one pin, one modality, random-walk trials."""
    participants = []
    trials = []
    for ci, rating in ((0, 1), (1, 5)):
        for i in range(n_per_class):
            pid = f"c{ci}p{i:02d}"
            participants.append(
                Participant.from_rating(pid, age=25, gender="m", self_rating=rating)
            )
            for k in range(trials_per_participant):
                trials.append(
                    make_trial(
                        n_frames,
                        participant_id=pid,
                        pin=pin,
                        modality=modality,
                        trial_index=k,
                        seed=hash((ci, i, k)) % (2**32),
                    )
                )
    return Dataset(participants=tuple(participants), trials=tuple(trials))


@pytest.fixture(scope="session")
def tiny_synth() -> Dataset:
    """4 participants, all pins, both modalities, 3 trials per (pin, modality)."""
    return synth_dataset(2, 11, trials_per_pin=3)
