"""Plain data records shared by the simulator, the preprocessing pipeline and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_CHANNELS = 16
N_ITEMS = 6


@dataclass(frozen=True)
class StimulusEvent:
    onset_sample: int
    item_index: int
    is_target: bool
    block_index: int


@dataclass
class RawRun:
    """Continuous multichannel recording with its stimulus table.

    ``samples`` is (channels, time); subject, session and run identify it.
    """

    samples: np.ndarray
    fs: float
    events: list[StimulusEvent]
    subject: int = 0
    session: int = 0
    run: int = 0
    target_item: int = -1

    def __post_init__(self):
        if self.fs <= 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be (channels, time), got {self.samples.shape}")
        n = self.samples.shape[1]
        for ev in self.events:
            if not 0 <= ev.onset_sample < n:
                raise ValueError(f"event onset {ev.onset_sample} outside signal of {n} samples")

    @property
    def n_blocks(self) -> int:
        return len({ev.block_index for ev in self.events})

    def event_arrays(self) -> dict[str, np.ndarray]:
        return {
            "onset": np.array([e.onset_sample for e in self.events], dtype=np.int64),
            "item": np.array([e.item_index for e in self.events], dtype=np.int64),
            "target": np.array([e.is_target for e in self.events], dtype=bool),
            "block": np.array([e.block_index for e in self.events], dtype=np.int64),
        }


@dataclass
class EEGEpoch:
    data: np.ndarray  # (channels, W)
    label: int  # 1 = target
    item_index: int
    block: int
    run: int
    session: int
    subject: int


@dataclass
class EpochSet:
    """Column-oriented collection of epochs; ``data`` is (N, channels, W)."""

    data: np.ndarray
    label: np.ndarray
    item: np.ndarray
    block: np.ndarray
    run: np.ndarray
    session: np.ndarray
    subject: np.ndarray
    dropped: int = 0
    meta: dict = field(default_factory=dict)

    COLUMNS = ("label", "item", "block", "run", "session", "subject")

    def __len__(self) -> int:
        return len(self.label)

    def __getitem__(self, i: int) -> EEGEpoch:
        return EEGEpoch(
            self.data[i],
            int(self.label[i]),
            int(self.item[i]),
            int(self.block[i]),
            int(self.run[i]),
            int(self.session[i]),
            int(self.subject[i]),
        )

    def take(self, idx) -> "EpochSet":
        idx = np.asarray(idx)
        return EpochSet(
            self.data[idx], *(getattr(self, c)[idx] for c in self.COLUMNS), dropped=0, meta=dict(self.meta)
        )

    @classmethod
    def empty(cls, channels: int = N_CHANNELS, width: int = 120) -> "EpochSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, channels, width)), z, z, z, z, z, z)

    @classmethod
    def concat(cls, sets: list["EpochSet"]) -> "EpochSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.data for s in sets]),
            *(np.concatenate([getattr(s, c) for s in sets]) for c in cls.COLUMNS),
            dropped=sum(s.dropped for s in sets),
        )

    def keys(self) -> np.ndarray:
        """One (subject, session, run, block, item) row per epoch; unique within a dataset."""
        return np.stack([self.subject, self.session, self.run, self.block, self.item], axis=1)
