"""Replay records and the append-only buffer used between slices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RoutingContext

__all__ = ["ReplayRecord", "ReplayBuffer", "RecordBatch", "stack_records"]


@dataclass(frozen=True)
class ReplayRecord:
    context: RoutingContext
    action: int
    reward: float
    gate_label: int
    slice_index: int = 0


@dataclass(frozen=True)
class RecordBatch:
    """Column view of a list of records, as consumed by the network."""

    embedding: np.ndarray  # (B, E)
    features: np.ndarray  # (B, 3)
    domain: np.ndarray  # (B,)
    action: np.ndarray  # (B,)
    reward: np.ndarray  # (B,)
    gate_label: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.action)

    def take(self, idx: np.ndarray) -> RecordBatch:
        return RecordBatch(
            self.embedding[idx],
            self.features[idx],
            self.domain[idx],
            self.action[idx],
            self.reward[idx],
            self.gate_label[idx],
        )


def stack_records(records) -> RecordBatch:
    if isinstance(records, RecordBatch):
        return records
    if isinstance(records, ReplayBuffer):
        return records.batch()
    records = list(records)
    return RecordBatch(
        np.array([r.context.embedding for r in records], dtype=np.float64),
        np.array([r.context.features for r in records], dtype=np.float64),
        np.array([r.context.domain_id for r in records], dtype=np.int64),
        np.array([r.action for r in records], dtype=np.int64),
        np.array([r.reward for r in records], dtype=np.float64),
        np.array([r.gate_label for r in records], dtype=np.float64),
    )


class ReplayBuffer:
    """Unbounded, append-only; nothing is ever evicted."""

    def __init__(self, records=()):
        self._records: list[ReplayRecord] = list(records)
        self._cache: RecordBatch | None = None

    def append(self, record: ReplayRecord) -> None:
        self._records.append(record)
        self._cache = None

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, i):
        return self._records[i]

    def batch(self) -> RecordBatch:
        if self._cache is None or len(self._cache) != len(self._records):
            self._cache = stack_records(self._records)
        return self._cache
