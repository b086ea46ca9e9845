"""Reference routing policies.

``mincost_policy`` and ``maxquality_policy`` read the full per-action ground
truth and are therefore oracles, not deployable routers. The binary router
is a logistic stand-in for a supervised strong/weak classifier over the same
precomputed embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .data import RoutingContext, Sample
from .reward import RewardParams, reward_table

__all__ = [
    "random_policy",
    "mincost_policy",
    "maxquality_policy",
    "BinaryRouterParams",
    "fit_binary_router",
    "binary_route",
    "binary_labels",
]


def random_policy(ctx: RoutingContext, rng: np.random.Generator, K: int) -> int:
    return int(rng.integers(K))


def mincost_policy(sample: Sample) -> int:
    return int(np.argmin(sample.cost))


def maxquality_policy(sample: Sample) -> int:
    return int(np.argmax(sample.quality))


@dataclass(frozen=True)
class BinaryRouterParams:
    strong_action: int
    weak_action: int
    weights: np.ndarray  # (E,)
    bias: float
    threshold: float = 0.5

    def __post_init__(self):
        if self.strong_action == self.weak_action:
            raise ValueError("strong and weak actions must differ")


def binary_labels(samples: list[Sample], cmax: float, reward_params: RewardParams):
    """``(strong, weak, labels)``; label 1 where strong's reward >= weak's."""
    table = np.array([reward_table(s, cmax, reward_params) for s in samples])
    avg = table.mean(0)
    strong, weak = int(np.argmax(avg)), int(np.argmin(avg))
    if strong == weak:
        raise ValueError("degenerate slice: every action has the same average reward")
    return strong, weak, (table[:, strong] >= table[:, weak]).astype(np.float64)


def fit_binary_router(
    train_slice: list[Sample],
    cmax: float,
    reward_params: RewardParams,
    l2: float = 1e-3,
) -> BinaryRouterParams:
    """Pick strong/weak by average reward, then fit an L2 logistic classifier."""
    if not train_slice:
        raise ValueError("empty training slice")
    strong, weak, y = binary_labels(train_slice, cmax, reward_params)
    X = np.array([s.embedding for s in train_slice], dtype=np.float64)
    n, E = X.shape

    def objective(theta):
        w, b = theta[:E], theta[E]
        z = X @ w + b
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w)
        r = (expit(z) - y) / n
        return loss, np.concatenate([X.T @ r + l2 * w, [r.sum()]])

    res = minimize(objective, np.zeros(E + 1), jac=True, method="L-BFGS-B")
    return BinaryRouterParams(strong, weak, res.x[:E].copy(), float(res.x[E]))


def binary_route(params: BinaryRouterParams, ctx: RoutingContext) -> int:
    p = expit(float(np.dot(params.weights, ctx.embedding)) + params.bias)
    return params.strong_action if p >= params.threshold else params.weak_action
