"""Simulated-online replay protocol, per-slice metrics and run comparison.

The dataset stream is cut in order into slices. Within a slice every query
goes through decide -> reveal chosen outcome -> append to buffer -> rank-1
update; after the slice the network is retrained on the whole buffer and the
inverse covariance is rebuilt. Baselines run over the identical stream and
skip the learning steps.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from .data import Dataset, Sample, normalize_cost
from .policy import UcbState, decide, rank1_update, rebuild
from .replay import ReplayBuffer, ReplayRecord
from .reward import FeedbackOracle, RewardParams, utility_reward
from .utilitynet import LossConfig, OptimizerState, init_params, train_epochs

__all__ = [
    "POLICY_KINDS",
    "WARMSTART_MODES",
    "ProtocolConfig",
    "PolicySpec",
    "TrainConfig",
    "SliceMetrics",
    "DecisionRow",
    "RunResult",
    "ProtocolError",
    "slice_bounds",
    "ReplaySimulator",
    "run_protocol",
    "compute_slice_metrics",
    "write_metrics_csv",
    "write_domain_csv",
    "write_decisions_csv",
    "read_metrics_csv",
    "Comparison",
    "compare_runs",
    "ReplayRecord",
    "ReplayBuffer",
]

log = logging.getLogger(__name__)

POLICY_KINDS = ("neural_ucb", "random", "min_cost", "max_quality", "binary_router")
WARMSTART_MODES = ("uniform_random_first_slice", "none")

# stream tags for per-purpose, per-slice RNGs
_RNG_INIT, _RNG_WARM, _RNG_TRAIN, _RNG_RANDOM = range(4)


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    num_slices: int = 20
    replay_epochs: int = 5
    seed: int = 0
    warmstart: str = "uniform_random_first_slice"

    def __post_init__(self):
        if self.num_slices < 1:
            raise ValueError("num_slices must be >= 1")
        if self.replay_epochs < 0:
            raise ValueError("replay_epochs must be >= 0")
        if self.warmstart not in WARMSTART_MODES:
            raise ValueError(f"warmstart must be one of {WARMSTART_MODES}")


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "neural_ucb"
    beta: float = 1.0
    lambda0: float = 1.0
    tau_g: float = 0.5

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"policy kind must be one of {POLICY_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    huber_delta: float = 1.0
    gate_weight: float = 1.0
    gate_margin: float = 0.05

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.huber_delta, self.gate_weight)


@dataclass
class SliceMetrics:
    slice_index: int  # 1-based
    avg_reward: float
    cum_reward: float
    avg_cost: float
    avg_selected_quality: float
    action_rate: np.ndarray
    per_domain_avg_reward: dict[int, float]
    per_domain_count: dict[int, int]
    gate_open_rate: float


@dataclass(frozen=True)
class DecisionRow:
    slice_index: int
    sample_id: str
    action: int
    reward: float
    used_ucb: bool
    gate_prob: float


@dataclass
class RunResult:
    metrics: list[SliceMetrics]
    decisions: list[DecisionRow]
    oracle: FeedbackOracle
    simulator: ReplaySimulator = field(repr=False)


def slice_bounds(n: int, num_slices: int) -> list[tuple[int, int]]:
    """Contiguous in-order partition; sizes differ by at most one."""
    if num_slices < 1 or num_slices > max(n, 1):
        raise ValueError(f"cannot cut {n} samples into {num_slices} slices")
    edges = [i * n // num_slices for i in range(num_slices + 1)]
    return list(zip(edges[:-1], edges[1:]))


def compute_slice_metrics(
    records: list[ReplayRecord],
    samples: list[Sample],
    cmax: float,
    reward_params: RewardParams,
    slice_index: int = 1,
    prior_cum: float = 0.0,
    gate_open: list[bool] | None = None,
    K: int | None = None,
) -> SliceMetrics:
    """Aggregate one slice. Each record's reward is re-derived from its
    sample's chosen-action (quality, cost) and must match exactly."""
    if len(records) != len(samples):
        raise ProtocolError(f"{len(records)} records for {len(samples)} samples")
    if not samples:
        raise ProtocolError("empty slice")
    K = K or len(samples[0].quality)
    rewards, costs, quals = [], [], []
    counts = np.zeros(K)
    dom_sum: dict[int, float] = {}
    dom_n: dict[int, int] = {}
    for j, (rec, s) in enumerate(zip(records, samples)):
        a = rec.action
        q, c = float(s.quality[a]), float(s.cost[a])
        r = utility_reward(q, normalize_cost(c, cmax), reward_params)
        if r != rec.reward or rec.context.domain_id != s.domain_id:
            raise ProtocolError(f"record {j} of slice {slice_index} does not match its sample")
        rewards.append(r)
        costs.append(c)
        quals.append(q)
        counts[a] += 1
        dom_sum[s.domain_id] = dom_sum.get(s.domain_id, 0.0) + r
        dom_n[s.domain_id] = dom_n.get(s.domain_id, 0) + 1
    n = len(records)
    total = float(np.sum(rewards))
    return SliceMetrics(
        slice_index=slice_index,
        avg_reward=total / n,
        cum_reward=prior_cum + total,
        avg_cost=float(np.mean(costs)),
        avg_selected_quality=float(np.mean(quals)),
        action_rate=counts / n,
        per_domain_avg_reward={d: dom_sum[d] / dom_n[d] for d in sorted(dom_sum)},
        per_domain_count={d: dom_n[d] for d in sorted(dom_n)},
        gate_open_rate=float(np.mean(gate_open)) if gate_open else 0.0,
    )


class ReplaySimulator:
    """Stateful runner for one policy over one dataset stream.

    ``run_slice`` may be called slice by slice; ``restore`` resumes a neural
    run from a checkpoint plus the replay buffer accumulated so far.
    """

    def __init__(
        self,
        dataset: Dataset,
        policy: PolicySpec = PolicySpec(),
        protocol: ProtocolConfig = ProtocolConfig(),
        reward_params: RewardParams = RewardParams(),
        train: TrainConfig = TrainConfig(),
    ):
        self.dataset = dataset
        self.policy = policy
        self.protocol = protocol
        self.reward_params = reward_params
        self.train = train
        self.header = dataset.header
        self.bounds = slice_bounds(len(dataset), protocol.num_slices)
        self.oracle = FeedbackOracle(dataset, reward_params)
        self.buffer = ReplayBuffer()
        self.metrics: list[SliceMetrics] = []
        self.decisions: list[DecisionRow] = []
        self.train_losses: list[list[float]] = []
        self.cum_reward = 0.0
        self.router: baselines.BinaryRouterParams | None = None
        self.params = self.opt = self.ucb = None
        if policy.kind == "neural_ucb":
            h = self.header
            self.params = init_params(h.E, h.D, h.K, seed=self._seed(_RNG_INIT, 0))
            self.opt = OptimizerState.for_params(self.params, lr=train.lr)
            self.ucb = UcbState.initial(beta=policy.beta, lambda0=policy.lambda0, tau_g=policy.tau_g)

    def _seed(self, tag: int, t: int) -> list[int]:
        return [self.protocol.seed, tag, t]

    def _rng(self, tag: int, t: int) -> np.random.Generator:
        return np.random.default_rng(self._seed(tag, t))

    @property
    def next_slice(self) -> int:
        return len(self.metrics)

    def restore(self, params, opt, buffer, completed_slices: int, cum_reward: float = 0.0) -> None:
        self.params, self.opt = params, opt
        self.buffer = ReplayBuffer(buffer)
        self.metrics = [None] * completed_slices  # placeholders keep slice numbering
        self.cum_reward = cum_reward
        rebuild(self.ucb, self.params, self.buffer)

    def _warm(self, t: int) -> bool:
        return t == 0 and self.protocol.warmstart == "uniform_random_first_slice"

    def run_slice(self, t: int) -> SliceMetrics:
        lo, hi = self.bounds[t]
        kind = self.policy.kind
        K = self.header.K
        warm = self._warm(t) and kind in ("neural_ucb", "binary_router")
        warm_rng = self._rng(_RNG_WARM, t)
        rand_rng = self._rng(_RNG_RANDOM, t)
        oracle = self.oracle

        if kind == "binary_router" and self.router is None and K > 1:
            # supervised fit on the first slice's full ground truth, then frozen
            train = [oracle.full_row(i) for i in range(lo, hi)]
            self.router = baselines.fit_binary_router(train, self.header.cmax, self.reward_params)

        records, gate_open = [], []
        for i in range(lo, hi):
            ctx = self.dataset.context(i)
            dec = None
            oracle.in_decision = True
            try:
                if kind == "neural_ucb":
                    dec = decide(self.params, self.ucb, ctx)
                    action = dec.chosen_action
                elif kind == "random":
                    action = baselines.random_policy(ctx, rand_rng, K)
                elif kind == "min_cost":
                    action = baselines.mincost_policy(oracle.full_row(i))
                elif kind == "max_quality":
                    action = baselines.maxquality_policy(oracle.full_row(i))
                elif K == 1:
                    action = 0  # a single arm leaves nothing to classify
                else:
                    action = baselines.binary_route(self.router, ctx)
            except Exception as exc:
                raise ProtocolError(f"slice {t + 1}, sample {i} ({self.dataset.ids[i]}): {exc}") from exc
            finally:
                oracle.in_decision = False
            if warm:
                action = int(warm_rng.integers(K))

            fb = oracle.reveal(i, action)
            gate_label = 0
            if dec is not None:
                gate_label = int(fb.reward < dec.mu_scores[action] - self.train.gate_margin)
                gate_open.append(dec.used_ucb)
            rec = ReplayRecord(ctx, action, fb.reward, gate_label, t + 1)
            records.append(rec)
            self.decisions.append(DecisionRow(
                t + 1, self.dataset.ids[i], action, fb.reward,
                bool(dec.used_ucb) if dec else False,
                float(dec.gate_prob) if dec else float("nan"),
            ))
            if kind == "neural_ucb":
                self.buffer.append(rec)
                rank1_update(self.ucb, dec.features[action])

        if kind == "neural_ucb":
            losses = train_epochs(
                self.params, self.opt, self.buffer, self.protocol.replay_epochs,
                self.train.batch_size, seed=self._seed(_RNG_TRAIN, t), config=self.train.loss,
            )
            self.train_losses.append(losses)
            rebuild(self.ucb, self.params, self.buffer)

        m = compute_slice_metrics(
            records, [self.dataset[i] for i in range(lo, hi)], self.header.cmax,
            self.reward_params, slice_index=t + 1, prior_cum=self.cum_reward,
            gate_open=gate_open, K=K,
        )
        self.cum_reward = m.cum_reward
        self.metrics.append(m)
        log.info("%s slice %d/%d avg_reward=%.4f", kind, t + 1, len(self.bounds), m.avg_reward)
        return m

    def run(self) -> RunResult:
        for t in range(self.next_slice, len(self.bounds)):
            self.run_slice(t)
        return RunResult([m for m in self.metrics if m is not None], self.decisions, self.oracle, self)


def run_protocol(
    dataset: Dataset,
    policy: PolicySpec = PolicySpec(),
    protocol: ProtocolConfig = ProtocolConfig(),
    reward_params: RewardParams = RewardParams(),
    train: TrainConfig = TrainConfig(),
) -> RunResult:
    return ReplaySimulator(dataset, policy, protocol, reward_params, train).run()


# ---------------------------------------------------------------------------
# files


def _f(x: float) -> str:
    return "%.17g" % x


def write_metrics_csv(metrics: list[SliceMetrics], path) -> None:
    """Columns: slice (1-based), avg_reward (utility units), cum_reward (sum of
    rewards so far), avg_cost (raw cost units), avg_quality ([0, 1]),
    gate_open_rate (fraction), action_rate_<a> (fraction)."""
    K = len(metrics[0].action_rate)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice", "avg_reward", "cum_reward", "avg_cost", "avg_quality", "gate_open_rate"]
                   + [f"action_rate_{a}" for a in range(K)])
        for m in metrics:
            w.writerow([m.slice_index, _f(m.avg_reward), _f(m.cum_reward), _f(m.avg_cost),
                        _f(m.avg_selected_quality), _f(m.gate_open_rate)]
                       + [_f(x) for x in m.action_rate])


def write_domain_csv(metrics: list[SliceMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice", "domain_id", "avg_reward", "count"])
        for m in metrics:
            for d, r in m.per_domain_avg_reward.items():
                w.writerow([m.slice_index, d, _f(r), m.per_domain_count[d]])


def write_decisions_csv(decisions: list[DecisionRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice", "sample_id", "action", "reward", "used_ucb", "gate_prob"])
        for d in decisions:
            w.writerow([d.slice_index, d.sample_id, d.action, _f(d.reward), int(d.used_ucb), _f(d.gate_prob)])


def read_metrics_csv(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ProtocolError(f"{path}: no metric rows")
    return [{k: (int(v) if k == "slice" else float(v)) for k, v in r.items()} for r in rows]


# ---------------------------------------------------------------------------
# comparison


@dataclass
class Comparison:
    """Per-slice metrics of several runs joined on slice index.

    ``values[run][metric]`` and ``diffs[run][metric]`` (against the first run)
    are arrays over slices. Slice 1 is flagged in ``warmstart_slices``
    because warm-start exploration dominates it.
    """

    runs: list[str]
    slices: list[int]
    metrics: list[str]
    values: dict[str, dict[str, np.ndarray]]
    diffs: dict[str, dict[str, np.ndarray]]
    warmstart_slices: tuple[int, ...] = (1,)

    def long_rows(self):
        for run in self.runs:
            for j, s in enumerate(self.slices):
                for m in self.metrics:
                    yield run, s, m, float(self.values[run][m][j])

    def final(self) -> dict[str, dict[str, float]]:
        return {r: {m: float(self.values[r][m][-1]) for m in self.metrics} for r in self.runs}


def compare_runs(metric_files, names: list[str] | None = None) -> Comparison:
    paths = [Path(p) for p in metric_files]
    if not paths:
        raise ProtocolError("nothing to compare")
    names = names or [p.parent.name or p.stem for p in paths]
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    tables = [read_metrics_csv(p) for p in paths]
    slices = [r["slice"] for r in tables[0]]
    metrics = [k for k in tables[0][0] if k != "slice"]
    values = {}
    for name, rows, p in zip(names, tables, paths):
        if [r["slice"] for r in rows] != slices:
            raise ProtocolError(f"{p}: slices {[r['slice'] for r in rows]} do not align with {slices}")
        missing = set(metrics) - rows[0].keys()
        if missing:
            raise ProtocolError(f"{p}: missing metric columns {sorted(missing)}")
        values[name] = {m: np.array([r[m] for r in rows]) for m in metrics}
    ref = values[names[0]]
    diffs = {n: {m: values[n][m] - ref[m] for m in metrics} for n in names}
    return Comparison(names, slices, metrics, values, diffs)
