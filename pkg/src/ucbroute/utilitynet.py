"""Two-branch utility network in plain numpy.

Trunk
    text MLP      E -> 256, ReLU
    domain table  D x 16
    feature MLP   [features(3), domain(16)] = 19 -> 32, ReLU
Utility branch
    action table  K x 32
    MLP           [text(256), feat(32), action(32)] = 320 -> 256 -> 256 -> 128, ReLU each
    head          128 -> 1 (raw, unsquashed mean utility)
Gating branch
    MLP           [text(256), feat(32)] = 288 -> 64, ReLU
    head          64 -> 1, sigmoid gives the gate probability

The 128-d output of the utility MLP is the "last hidden" feature used for
the UCB bonus. Gradients are computed by hand; see ``tests/test_utilitynet.py``
for the finite-difference check.
"""
from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import expit

from .data import N_FEATURES, RoutingContext
from .replay import RecordBatch, stack_records

__all__ = [
    "TEXT_HIDDEN",
    "DOMAIN_DIM",
    "FEAT_HIDDEN",
    "ACTION_DIM",
    "UTIL_HIDDEN",
    "LAST_HIDDEN",
    "GATE_HIDDEN",
    "UtilityNetParams",
    "ForwardTrace",
    "BatchTrace",
    "OptimizerState",
    "LossConfig",
    "param_count",
    "init_params",
    "zeros_like_params",
    "forward",
    "forward_batch",
    "forward_all_actions",
    "score_actions",
    "loss_and_gradients",
    "batch_loss",
    "train_epochs",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

TEXT_HIDDEN = 256
DOMAIN_DIM = 16
FEAT_HIDDEN = 32
ACTION_DIM = 32
UTIL_HIDDEN = (256, 256)
LAST_HIDDEN = 128
GATE_HIDDEN = 64

FEAT_IN = N_FEATURES + DOMAIN_DIM  # 19
UTIL_IN = TEXT_HIDDEN + FEAT_HIDDEN + ACTION_DIM  # 320
GATE_IN = TEXT_HIDDEN + FEAT_HIDDEN  # 288

CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class UtilityNetParams:
    """All weights, biases and embedding tables.

    Arrays are packed into the single vector ``flat`` on construction and the
    fields are reshaped views of it, so updating ``flat`` updates every
    tensor. Mutate arrays in place; rebinding a field breaks the packing.
    Field order is the declaration order used by checkpoints.
    """

    text_w: np.ndarray
    text_b: np.ndarray
    domain_emb: np.ndarray
    feat_w: np.ndarray
    feat_b: np.ndarray
    action_emb: np.ndarray
    util_w1: np.ndarray
    util_b1: np.ndarray
    util_w2: np.ndarray
    util_b2: np.ndarray
    util_w3: np.ndarray
    util_b3: np.ndarray
    uhead_w: np.ndarray
    uhead_b: np.ndarray
    gate_w: np.ndarray
    gate_b: np.ndarray
    ghead_w: np.ndarray
    ghead_b: np.ndarray

    def __post_init__(self):
        shapes = expected_shapes(self.E, self.D, self.K)
        for name, arr in self.items():
            if np.shape(arr) != shapes[name]:
                raise ValueError(f"{name} has shape {np.shape(arr)}, expected {shapes[name]}")
        # pack into one contiguous vector; fields become views into it
        self.flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for _, a in self.items()])
        assert self.flat.size == param_count(self.E, self.D, self.K), self.flat.size
        start = 0
        for name in self.names():
            shape = shapes[name]
            size = int(np.prod(shape))
            setattr(self, name, self.flat[start:start + size].reshape(shape))
            start += size

    @property
    def E(self) -> int:
        return self.text_w.shape[0]

    @property
    def D(self) -> int:
        return self.domain_emb.shape[0]

    @property
    def K(self) -> int:
        return self.action_emb.shape[0]

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def items(self):
        return [(n, getattr(self, n)) for n in self.names()]

    def copy(self) -> UtilityNetParams:
        return UtilityNetParams(**{n: a.copy() for n, a in self.items()})


def expected_shapes(E: int, D: int, K: int) -> dict[str, tuple[int, ...]]:
    h1, h2 = UTIL_HIDDEN
    return {
        "text_w": (E, TEXT_HIDDEN),
        "text_b": (TEXT_HIDDEN,),
        "domain_emb": (D, DOMAIN_DIM),
        "feat_w": (FEAT_IN, FEAT_HIDDEN),
        "feat_b": (FEAT_HIDDEN,),
        "action_emb": (K, ACTION_DIM),
        "util_w1": (UTIL_IN, h1),
        "util_b1": (h1,),
        "util_w2": (h1, h2),
        "util_b2": (h2,),
        "util_w3": (h2, LAST_HIDDEN),
        "util_b3": (LAST_HIDDEN,),
        "uhead_w": (LAST_HIDDEN, 1),
        "uhead_b": (1,),
        "gate_w": (GATE_IN, GATE_HIDDEN),
        "gate_b": (GATE_HIDDEN,),
        "ghead_w": (GATE_HIDDEN, 1),
        "ghead_b": (1,),
    }


def param_count(E: int, D: int, K: int) -> int:
    h1, h2 = UTIL_HIDDEN
    return (
        (E + 1) * TEXT_HIDDEN
        + D * DOMAIN_DIM
        + (FEAT_IN + 1) * FEAT_HIDDEN
        + K * ACTION_DIM
        + (UTIL_IN + 1) * h1
        + (h1 + 1) * h2
        + (h2 + 1) * LAST_HIDDEN
        + (LAST_HIDDEN + 1)
        + (GATE_IN + 1) * GATE_HIDDEN
        + (GATE_HIDDEN + 1)
    )


def init_params(E: int, D: int, K: int, seed: int = 0, emb_std: float = 0.1) -> UtilityNetParams:
    """Affine layers ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); tables ~ N(0, emb_std)."""
    rng = np.random.default_rng(seed)
    shapes = expected_shapes(E, D, K)
    out = {}
    for name in UtilityNetParams.names():
        shape = shapes[name]
        if name in ("domain_emb", "action_emb"):
            out[name] = emb_std * rng.standard_normal(shape)
            continue
        # biases share the fan-in of their weight matrix
        fan_in = shapes[name.replace("_b", "_w")][0]
        bound = 1.0 / np.sqrt(fan_in)
        out[name] = rng.uniform(-bound, bound, size=shape)
    return UtilityNetParams(**out)


def zeros_like_params(params: UtilityNetParams) -> UtilityNetParams:
    return UtilityNetParams(**{n: np.zeros_like(a) for n, a in params.items()})


# ---------------------------------------------------------------------------
# forward


@dataclass
class BatchTrace:
    """Activations for a batch of (context, action) pairs, kept for backprop."""

    x_emb: np.ndarray
    feat_in: np.ndarray
    domain: np.ndarray
    action: np.ndarray
    pre_emb: np.ndarray
    h_emb: np.ndarray
    pre_feat: np.ndarray
    h_feat: np.ndarray
    z_u: np.ndarray
    pre_u1: np.ndarray
    u1: np.ndarray
    pre_u2: np.ndarray
    u2: np.ndarray
    pre_u3: np.ndarray
    h_last: np.ndarray
    mu: np.ndarray
    z_g: np.ndarray
    pre_g: np.ndarray
    g: np.ndarray
    gate_logit: np.ndarray

    @property
    def gate_prob(self) -> np.ndarray:
        return _sigmoid(self.gate_logit)


@dataclass
class ForwardTrace:
    h_emb: np.ndarray
    h_feat: np.ndarray
    h_last: np.ndarray
    mu: float
    gate_logit: float
    gate_prob: float
    cache: BatchTrace | None = field(default=None, repr=False)


def _relu(x):
    return np.maximum(x, 0.0)


_sigmoid = expit


def _check_ids(params: UtilityNetParams, domain, action) -> None:
    domain = np.asarray(domain)
    action = np.asarray(action)
    if domain.size and (domain.min() < 0 or domain.max() >= params.D):
        raise IndexError(f"domain id out of range [0, {params.D})")
    if action.size and (action.min() < 0 or action.max() >= params.K):
        raise IndexError(f"action out of range [0, {params.K})")


def _trunk(p: UtilityNetParams, x_emb, x_feat, domain):
    pre_emb = x_emb @ p.text_w + p.text_b
    h_emb = _relu(pre_emb)
    feat_in = np.concatenate([x_feat, p.domain_emb[domain]], axis=1)
    pre_feat = feat_in @ p.feat_w + p.feat_b
    h_feat = _relu(pre_feat)
    return pre_emb, h_emb, feat_in, pre_feat, h_feat


def _utility(p: UtilityNetParams, h_emb, h_feat, action):
    z_u = np.concatenate([h_emb, h_feat, p.action_emb[action]], axis=1)
    pre_u1 = z_u @ p.util_w1 + p.util_b1
    u1 = _relu(pre_u1)
    pre_u2 = u1 @ p.util_w2 + p.util_b2
    u2 = _relu(pre_u2)
    pre_u3 = u2 @ p.util_w3 + p.util_b3
    h_last = _relu(pre_u3)
    mu = (h_last @ p.uhead_w)[:, 0] + p.uhead_b[0]
    return z_u, pre_u1, u1, pre_u2, u2, pre_u3, h_last, mu


def _gate(p: UtilityNetParams, h_emb, h_feat):
    z_g = np.concatenate([h_emb, h_feat], axis=1)
    pre_g = z_g @ p.gate_w + p.gate_b
    g = _relu(pre_g)
    logit = (g @ p.ghead_w)[:, 0] + p.ghead_b[0]
    return z_g, pre_g, g, logit


def forward_batch(params: UtilityNetParams, x_emb, x_feat, domain, action) -> BatchTrace:
    x_emb = np.atleast_2d(np.asarray(x_emb, dtype=np.float64))
    x_feat = np.atleast_2d(np.asarray(x_feat, dtype=np.float64))
    domain = np.asarray(domain, dtype=np.int64).reshape(-1)
    action = np.asarray(action, dtype=np.int64).reshape(-1)
    _check_ids(params, domain, action)
    pre_emb, h_emb, feat_in, pre_feat, h_feat = _trunk(params, x_emb, x_feat, domain)
    z_u, pre_u1, u1, pre_u2, u2, pre_u3, h_last, mu = _utility(params, h_emb, h_feat, action)
    z_g, pre_g, g, logit = _gate(params, h_emb, h_feat)
    return BatchTrace(
        x_emb, feat_in, domain, action, pre_emb, h_emb, pre_feat, h_feat,
        z_u, pre_u1, u1, pre_u2, u2, pre_u3, h_last, mu, z_g, pre_g, g, logit,
    )


def _row_trace(bt: BatchTrace, i: int) -> ForwardTrace:
    logit = float(bt.gate_logit[i])
    return ForwardTrace(
        h_emb=bt.h_emb[i],
        h_feat=bt.h_feat[i],
        h_last=bt.h_last[i],
        mu=float(bt.mu[i]),
        gate_logit=logit,
        gate_prob=float(_sigmoid(logit)),
        cache=bt,
    )


def forward(params: UtilityNetParams, ctx: RoutingContext, action: int) -> ForwardTrace:
    bt = forward_batch(params, ctx.embedding, ctx.features, [ctx.domain_id], [action])
    return _row_trace(bt, 0)


def score_actions(params: UtilityNetParams, ctx: RoutingContext):
    """Fast path for decisions: ``(mu (K,), h_last (K, 128), gate_prob)``.

    The trunk and gate run once; only the utility branch is evaluated per
    action.
    """
    if not 0 <= ctx.domain_id < params.D:
        raise IndexError(f"domain id {ctx.domain_id} out of range [0, {params.D})")
    x_emb = np.asarray(ctx.embedding, dtype=np.float64)[None, :]
    x_feat = np.asarray(ctx.features, dtype=np.float64)[None, :]
    _, h_emb, _, _, h_feat = _trunk(params, x_emb, x_feat, np.array([ctx.domain_id]))
    _, _, _, logit = _gate(params, h_emb, h_feat)
    K = params.K
    out = _utility(params, np.repeat(h_emb, K, 0), np.repeat(h_feat, K, 0), np.arange(K))
    return out[7], out[6], float(_sigmoid(logit[0]))


def forward_all_actions(params: UtilityNetParams, ctx: RoutingContext) -> list[ForwardTrace]:
    if not 0 <= ctx.domain_id < params.D:
        raise IndexError(f"domain id {ctx.domain_id} out of range [0, {params.D})")
    x_emb = np.asarray(ctx.embedding, dtype=np.float64)[None, :]
    x_feat = np.asarray(ctx.features, dtype=np.float64)[None, :]
    domain = np.array([ctx.domain_id])
    pre_emb, h_emb, feat_in, pre_feat, h_feat = _trunk(params, x_emb, x_feat, domain)
    z_g, pre_g, g, logit = _gate(params, h_emb, h_feat)
    K = params.K
    rep = lambda a: np.repeat(a, K, 0)  # noqa: E731
    z_u, pre_u1, u1, pre_u2, u2, pre_u3, h_last, mu = _utility(params, rep(h_emb), rep(h_feat), np.arange(K))
    bt = BatchTrace(
        rep(x_emb), rep(feat_in), rep(domain), np.arange(K), rep(pre_emb), rep(h_emb),
        rep(pre_feat), rep(h_feat), z_u, pre_u1, u1, pre_u2, u2, pre_u3, h_last, mu,
        rep(z_g), rep(pre_g), rep(g), rep(logit),
    )
    return [_row_trace(bt, a) for a in range(K)]


# ---------------------------------------------------------------------------
# loss and backprop


@dataclass(frozen=True)
class LossConfig:
    huber_delta: float = 1.0
    gate_weight: float = 1.0


def huber(residual: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(residual)
    return np.where(a <= delta, 0.5 * residual**2, delta * (a - 0.5 * delta))


def bce_with_logits(logit: np.ndarray, y: np.ndarray) -> np.ndarray:
    # log(1 + e^z) - y z, stable for large |z|
    return np.logaddexp(0.0, logit) - y * logit


def _backward(p: UtilityNetParams, t: BatchTrace, d_mu: np.ndarray, d_logit: np.ndarray) -> UtilityNetParams:
    g = {}
    # utility head and MLP
    g["uhead_w"] = t.h_last.T @ d_mu[:, None]
    g["uhead_b"] = np.array([d_mu.sum()])
    d = (d_mu[:, None] @ p.uhead_w.T) * (t.pre_u3 > 0)
    g["util_w3"] = t.u2.T @ d
    g["util_b3"] = d.sum(0)
    d = (d @ p.util_w3.T) * (t.pre_u2 > 0)
    g["util_w2"] = t.u1.T @ d
    g["util_b2"] = d.sum(0)
    d = (d @ p.util_w2.T) * (t.pre_u1 > 0)
    g["util_w1"] = t.z_u.T @ d
    g["util_b1"] = d.sum(0)
    d_zu = d @ p.util_w1.T
    d_emb = d_zu[:, :TEXT_HIDDEN]
    d_feat = d_zu[:, TEXT_HIDDEN:GATE_IN]
    g["action_emb"] = np.zeros_like(p.action_emb)
    np.add.at(g["action_emb"], t.action, d_zu[:, GATE_IN:])

    # gating head and MLP
    g["ghead_w"] = t.g.T @ d_logit[:, None]
    g["ghead_b"] = np.array([d_logit.sum()])
    d = (d_logit[:, None] @ p.ghead_w.T) * (t.pre_g > 0)
    g["gate_w"] = t.z_g.T @ d
    g["gate_b"] = d.sum(0)
    d_zg = d @ p.gate_w.T
    d_emb = d_emb + d_zg[:, :TEXT_HIDDEN]
    d_feat = d_feat + d_zg[:, TEXT_HIDDEN:]

    # shared trunk
    d = d_feat * (t.pre_feat > 0)
    g["feat_w"] = t.feat_in.T @ d
    g["feat_b"] = d.sum(0)
    g["domain_emb"] = np.zeros_like(p.domain_emb)
    np.add.at(g["domain_emb"], t.domain, (d @ p.feat_w.T)[:, N_FEATURES:])
    d = d_emb * (t.pre_emb > 0)
    g["text_w"] = t.x_emb.T @ d
    g["text_b"] = d.sum(0)
    return UtilityNetParams(**g)


def _loss_terms(t: BatchTrace, b: RecordBatch, config: LossConfig):
    res = t.mu - b.reward
    loss_u = huber(res, config.huber_delta).mean()
    loss_g = bce_with_logits(t.gate_logit, b.gate_label).mean()
    return res, float(loss_u + config.gate_weight * loss_g)


def batch_loss(params: UtilityNetParams, batch, config: LossConfig = LossConfig()) -> float:
    """Forward-only value of the training loss."""
    b = stack_records(batch)
    if len(b) == 0:
        raise ValueError("empty batch")
    t = forward_batch(params, b.embedding, b.features, b.domain, b.action)
    return _loss_terms(t, b, config)[1]


def loss_and_gradients(params: UtilityNetParams, batch, config: LossConfig = LossConfig()):
    """Mean Huber utility loss plus weighted mean BCE gate loss, with gradients.

    ``batch`` is a list of :class:`~ucbroute.replay.ReplayRecord`, a
    :class:`~ucbroute.replay.ReplayBuffer` or a
    :class:`~ucbroute.replay.RecordBatch`.
    """
    b = stack_records(batch)
    n = len(b)
    if n == 0:
        raise ValueError("empty batch")
    t = forward_batch(params, b.embedding, b.features, b.domain, b.action)
    res, loss = _loss_terms(t, b, config)
    d_mu = np.clip(res, -config.huber_delta, config.huber_delta) / n
    d_logit = config.gate_weight * (_sigmoid(t.gate_logit) - b.gate_label) / n
    return loss, _backward(params, t, d_mu, d_logit)


# ---------------------------------------------------------------------------
# optimizer and training


@dataclass
class OptimizerState:
    """Adam moments mirroring the parameter shapes."""

    m: UtilityNetParams
    v: UtilityNetParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: UtilityNetParams, lr: float = 1e-3, **kw) -> OptimizerState:
        return cls(zeros_like_params(params), zeros_like_params(params), lr=lr, **kw)

    def apply(self, params: UtilityNetParams, grads: UtilityNetParams) -> None:
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        g, m, v = grads.flat, self.m.flat, self.v.flat
        tmp = np.multiply(g, 1.0 - self.beta1)
        m *= self.beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - self.beta2
        v *= self.beta2
        v += tmp
        # lr * m_hat / (sqrt(v_hat) + eps)
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr / c1
        params.flat -= tmp


def train_epochs(
    params: UtilityNetParams,
    opt: OptimizerState,
    buffer,
    epochs: int,
    batch_size: int = 256,
    seed: int = 0,
    config: LossConfig = LossConfig(),
) -> list[float]:
    """Run ``epochs`` shuffled minibatch passes over ``buffer``.

    Updates ``params`` and ``opt`` in place and returns the mean loss of each
    epoch (as seen during that epoch, before each step).
    """
    data = stack_records(buffer)
    n = len(data)
    if n == 0:
        raise ValueError("cannot train on an empty buffer")
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            loss, grads = loss_and_gradients(params, data.take(idx), config)
            opt.apply(params, grads)
            total += loss * len(idx)
        losses.append(total / n)
    return losses


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: UtilityNetParams, opt: OptimizerState, path) -> None:
    """Write an ``.npz`` container: header, then params, then optimizer state."""
    arrays = {
        "header": np.array([CHECKPOINT_VERSION, params.E, params.D, params.K], dtype=np.int64),
        "opt_step": np.array([opt.step], dtype=np.int64),
        "opt_hyper": np.array([opt.lr, opt.beta1, opt.beta2, opt.eps], dtype=np.float64),
    }
    for name, a in params.items():
        arrays[f"param/{name}"] = a.astype(np.float64)
    for name, a in opt.m.items():
        arrays[f"adam_m/{name}"] = a.astype(np.float64)
    for name, a in opt.v.items():
        arrays[f"adam_v/{name}"] = a.astype(np.float64)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expect_dims: tuple[int, int, int] | None = None):
    """Inverse of :func:`save_checkpoint`; returns ``(params, opt)``.

    ``expect_dims`` is an optional ``(E, D, K)`` the file must match.
    """
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, EOFError, ValueError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    try:
        version, E, D, K = (int(x) for x in data["header"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} has no valid header") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if expect_dims is not None and tuple(expect_dims) != (E, D, K):
        raise CheckpointError(f"checkpoint dims (E, D, K)={(E, D, K)}, expected {tuple(expect_dims)}")
    names = UtilityNetParams.names()
    try:
        params = UtilityNetParams(**{n: data[f"param/{n}"] for n in names})
        m = UtilityNetParams(**{n: data[f"adam_m/{n}"] for n in names})
        v = UtilityNetParams(**{n: data[f"adam_v/{n}"] for n in names})
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} is missing array {exc}") from None
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    lr, b1, b2, eps = (float(x) for x in data["opt_hyper"])
    opt = OptimizerState(m, v, int(data["opt_step"][0]), lr, b1, b2, eps)
    return params, opt
