"""NeuralUCB action selection on the utility network's last hidden layer.

One inverse covariance matrix is shared by all actions. It is updated with a
Sherman-Morrison rank-1 step for every decision and rebuilt from the replay
buffer after the network is retrained, since the features move with the
weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import RoutingContext
from .replay import stack_records
from .utilitynet import LAST_HIDDEN, UtilityNetParams, forward_batch, score_actions

__all__ = [
    "UcbStateError",
    "UcbState",
    "Decision",
    "augment_feature",
    "ucb_score",
    "decide",
    "rank1_update",
    "rebuild",
]

NEG_QUAD_TOL = 1e-9


class UcbStateError(RuntimeError):
    """The inverse covariance is no longer positive definite."""


@dataclass
class UcbState:
    A_inv: np.ndarray
    beta: float = 1.0
    lambda0: float = 1.0
    tau_g: float = 0.5
    update_count: int = 0

    @classmethod
    def initial(cls, dim: int = LAST_HIDDEN + 1, beta: float = 1.0, lambda0: float = 1.0,
                tau_g: float = 0.5) -> UcbState:
        if lambda0 <= 0:
            raise ValueError(f"lambda0 must be positive, got {lambda0}")
        if beta < 0:
            raise ValueError(f"beta must be non-negative, got {beta}")
        return cls(np.eye(dim) / lambda0, beta, lambda0, tau_g, 0)

    @property
    def dim(self) -> int:
        return self.A_inv.shape[0]


@dataclass
class Decision:
    chosen_action: int
    mu_scores: np.ndarray
    bonus_scores: np.ndarray
    ucb_scores: np.ndarray
    gate_prob: float
    used_ucb: bool
    safe_action: int
    features: np.ndarray = field(repr=False)  # (K, H+1) augmented features


def augment_feature(h: np.ndarray) -> np.ndarray:
    """Append a constant 1 (bias coordinate); works on a vector or row-stack."""
    h = np.asarray(h, dtype=np.float64)
    return np.concatenate([h, np.ones(h.shape[:-1] + (1,))], axis=-1)


def _quad_forms(A_inv: np.ndarray, G: np.ndarray) -> np.ndarray:
    q = np.einsum("ij,jk,ik->i", G, A_inv, G)
    if np.any(q < -NEG_QUAD_TOL):
        raise UcbStateError(f"negative quadratic form {q.min():.3e}; A_inv is corrupted")
    return np.maximum(q, 0.0)


def ucb_score(mu: float, g: np.ndarray, state: UcbState) -> tuple[float, float]:
    """Return ``(mu + bonus, bonus)`` with ``bonus = beta * sqrt(g' A_inv g)``."""
    q = _quad_forms(state.A_inv, np.asarray(g, dtype=np.float64)[None, :])[0]
    bonus = state.beta * float(np.sqrt(q))
    return mu + bonus, bonus


def decide(params: UtilityNetParams, state: UcbState, ctx: RoutingContext) -> Decision:
    """Gated NeuralUCB choice for one context.

    The safe action maximizes predicted mean utility. When the gate
    probability reaches ``tau_g`` the action maximizing ``mu + bonus`` is
    taken instead. Both argmaxes break ties toward the lowest index.
    """
    mu, h_last, gate_prob = score_actions(params, ctx)
    G = augment_feature(h_last)
    bonus = state.beta * np.sqrt(_quad_forms(state.A_inv, G))
    ucb = mu + bonus
    safe = int(np.argmax(mu))
    used_ucb = gate_prob >= state.tau_g
    chosen = int(np.argmax(ucb)) if used_ucb else safe
    return Decision(chosen, mu, bonus, ucb, gate_prob, bool(used_ucb), safe, G)


def rank1_update(state: UcbState, g: np.ndarray) -> UcbState:
    """In-place Sherman-Morrison step for ``A <- A + g g'``; returns ``state``."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise UcbStateError("non-finite feature vector")
    u = state.A_inv @ g
    denom = 1.0 + g @ u
    if not denom > 0:
        raise UcbStateError(f"Sherman-Morrison denominator {denom} <= 0")
    A = state.A_inv - np.outer(u, u) / denom
    state.A_inv = 0.5 * (A + A.T)
    state.update_count += 1
    return state


def buffer_features(params: UtilityNetParams, buffer, chunk: int = 4096) -> np.ndarray:
    """Augmented last-hidden features of every buffered (context, action)."""
    b = stack_records(buffer)
    out = []
    for s in range(0, len(b), chunk):
        t = forward_batch(params, b.embedding[s:s + chunk], b.features[s:s + chunk],
                          b.domain[s:s + chunk], b.action[s:s + chunk])
        out.append(augment_feature(t.h_last))
    if not out:
        return np.zeros((0, LAST_HIDDEN + 1))
    return np.concatenate(out)


def rebuild(state: UcbState, params: UtilityNetParams, buffer) -> UcbState:
    """Recompute ``A_inv = (lambda0 I + sum g g')^-1`` under the current network."""
    G = buffer_features(params, buffer) if len(buffer) else np.zeros((0, state.dim))
    if not np.all(np.isfinite(G)):
        raise UcbStateError("non-finite features in buffer")
    A = state.lambda0 * np.eye(state.dim) + G.T @ G
    try:
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise UcbStateError(f"rebuild inversion failed: {exc}") from None
    state.A_inv = 0.5 * (A_inv + A_inv.T)
    state.update_count = len(G)
    return state
