"""Utility reward coupling model quality with log-normalized cost.

Full reward tables are only reachable through :class:`FeedbackOracle`, which
counts every access. The replay harness hands policies a
:class:`~ucbroute.data.RoutingContext` and reveals just the chosen action's
outcome, so the counters double as an audit of partial feedback.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Sample, normalize_cost, normalize_costs

__all__ = [
    "RewardParams",
    "utility_reward",
    "reward_table",
    "Feedback",
    "FeedbackOracle",
    "reward_matrix",
]


@dataclass(frozen=True)
class RewardParams:
    lambda_cost: float = 1.0

    def __post_init__(self):
        if not self.lambda_cost >= 0:
            raise ValueError(f"lambda_cost must be >= 0, got {self.lambda_cost}")


def utility_reward(q: float, c_norm: float, params: RewardParams) -> float:
    """``q * exp(-lambda * c_norm)``."""
    return q * math.exp(-params.lambda_cost * c_norm)


def reward_table(sample: Sample, cmax: float, params: RewardParams) -> np.ndarray:
    """Rewards of all K actions for one sample. For oracles and metrics only."""
    cn = np.array([normalize_cost(float(c), cmax) for c in sample.cost])
    return np.array(
        [utility_reward(float(q), float(c), params) for q, c in zip(sample.quality, cn)]
    )


@dataclass(frozen=True)
class Feedback:
    """What gets revealed after acting: the chosen action's outcome only."""

    action: int
    reward: float
    quality: float
    cost: float


class FeedbackOracle:
    """Gatekeeper over a dataset's full-information ground truth.

    ``reveal`` is the partial-feedback channel. ``full_rewards`` and
    ``full_row`` expose every action and exist for baselines that are
    explicitly oracles (min-cost, max-quality), for fitting the supervised
    binary router, and for metrics. While ``in_decision`` is set (the harness
    sets it around every policy decision) any access is recorded in
    ``decision_reads``.
    """

    def __init__(self, dataset: Dataset, params: RewardParams):
        self._ds = dataset
        self.params = params
        self.reveals = 0
        self.full_reads = 0
        self.decision_reads = 0
        self.unchosen_reads = 0
        self.in_decision = False

    @property
    def K(self) -> int:
        return self._ds.header.K

    def _touch(self, full: bool) -> None:
        if self.in_decision:
            self.decision_reads += 1
        if full:
            self.full_reads += 1
            self.unchosen_reads += self.K - 1

    def reveal(self, i: int, action: int) -> Feedback:
        self._touch(full=False)
        self.reveals += 1
        q = float(self._ds.quality[i, action])
        c = float(self._ds.cost[i, action])
        r = utility_reward(q, normalize_cost(c, self._ds.header.cmax), self.params)
        return Feedback(action, r, q, c)

    def full_row(self, i: int) -> Sample:
        self._touch(full=True)
        return self._ds[i]

    def full_rewards(self, i: int) -> np.ndarray:
        self._touch(full=True)
        return reward_table(self._ds[i], self._ds.header.cmax, self.params)


def reward_matrix(dataset: Dataset, params: RewardParams) -> np.ndarray:
    """(n, K) reward table for a whole dataset; vectorized, metrics/oracles only."""
    cn = normalize_costs(dataset.cost, dataset.header.cmax)
    return dataset.quality * np.exp(-params.lambda_cost * cn)
