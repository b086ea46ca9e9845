"""Dataset model, line-delimited dataset file I/O, synthetic generation and
cost normalization.

A dataset is an ordered stream of queries. Every sample carries the quality
and raw cost of *all* K candidate models so that routing policies can be
replayed offline; the harness is responsible for only revealing the chosen
model's outcome to a policy.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DatasetError",
    "Header",
    "Sample",
    "RoutingContext",
    "Dataset",
    "load_dataset",
    "write_dataset",
    "format_dataset",
    "generate_synthetic",
    "normalize_cost",
    "normalize_costs",
    "clamp_counter",
]

N_FEATURES = 3
CMAX_RTOL = 1e-9


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset content."""


@dataclass(frozen=True)
class RoutingContext:
    """What a policy is allowed to see about a query."""

    embedding: np.ndarray
    features: np.ndarray
    domain_id: int


@dataclass(frozen=True)
class Sample:
    id: str
    domain_id: int
    embedding: np.ndarray
    features: np.ndarray
    quality: np.ndarray
    cost: np.ndarray

    @property
    def context(self) -> RoutingContext:
        return RoutingContext(self.embedding, self.features, self.domain_id)


@dataclass(frozen=True)
class Header:
    K: int
    D: int
    E: int
    cmax: float
    model_names: tuple[str, ...]


@dataclass(eq=False)
class Dataset:
    """Column-oriented container; ``dataset[i]`` yields a :class:`Sample`.

    ``planted_best`` is only set by :func:`generate_synthetic` and is never
    serialized.
    """

    header: Header
    ids: list[str]
    domain_ids: np.ndarray  # (n,) int
    embeddings: np.ndarray  # (n, E)
    features: np.ndarray  # (n, 3)
    quality: np.ndarray  # (n, K)
    cost: np.ndarray  # (n, K)
    planted_best: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            self.ids[i],
            int(self.domain_ids[i]),
            self.embeddings[i],
            self.features[i],
            self.quality[i],
            self.cost[i],
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def context(self, i: int) -> RoutingContext:
        return RoutingContext(self.embeddings[i], self.features[i], int(self.domain_ids[i]))

    def validate(self) -> None:
        h = self.header
        n = len(self.ids)
        shapes = {
            "domain_ids": (self.domain_ids.shape, (n,)),
            "embeddings": (self.embeddings.shape, (n, h.E)),
            "features": (self.features.shape, (n, N_FEATURES)),
            "quality": (self.quality.shape, (n, h.K)),
            "cost": (self.cost.shape, (n, h.K)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise DatasetError(f"{name} has shape {got}, expected {want}")
        if len(h.model_names) != h.K:
            raise DatasetError(f"header lists {len(h.model_names)} models for K={h.K}")
        if n and (self.domain_ids.min() < 0 or self.domain_ids.max() >= h.D):
            raise DatasetError(f"domain id out of range [0, {h.D})")
        if np.any((self.quality < 0) | (self.quality > 1)) or not np.all(np.isfinite(self.quality)):
            raise DatasetError("quality values must lie in [0, 1]")
        if np.any(self.cost < 0) or not np.all(np.isfinite(self.cost)):
            raise DatasetError("cost values must be finite and >= 0")
        if n:
            cmax = float(self.cost.max())
            if not math.isclose(cmax, h.cmax, rel_tol=CMAX_RTOL, abs_tol=0.0):
                raise DatasetError(f"header CMAX={h.cmax!r} disagrees with data max {cmax!r}")


# ---------------------------------------------------------------------------
# cost normalization


class _ClampCounter:
    """Counts costs that exceeded Cmax and were clamped to 1."""

    def __init__(self) -> None:
        self.count = 0

    def reset(self) -> None:
        self.count = 0


clamp_counter = _ClampCounter()


def normalize_cost(c: float, cmax: float) -> float:
    """Log-normalized cost ``log(1+c) / log(1+cmax)`` in [0, 1].

    Costs above ``cmax`` clamp to 1 and bump :data:`clamp_counter`.
    """
    if cmax <= 0:
        raise ValueError(f"cmax must be positive, got {cmax}")
    if c < 0:
        raise ValueError(f"cost must be non-negative, got {c}")
    if c > cmax:
        clamp_counter.count += 1
        warnings.warn(f"cost {c} exceeds cmax {cmax}; clamped", RuntimeWarning, stacklevel=2)
        return 1.0
    return math.log1p(c) / math.log1p(cmax)


def normalize_costs(c: np.ndarray, cmax: float) -> np.ndarray:
    """Vectorized :func:`normalize_cost` (same clamping rule)."""
    if cmax <= 0:
        raise ValueError(f"cmax must be positive, got {cmax}")
    c = np.asarray(c, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("costs must be non-negative")
    over = c > cmax
    if over.any():
        clamp_counter.count += int(over.sum())
    return np.where(over, 1.0, np.log1p(np.minimum(c, cmax)) / math.log1p(cmax))


# ---------------------------------------------------------------------------
# file format


def _fmt(x: float) -> str:
    return "%.17g" % x


def _fmt_vec(v) -> str:
    return ",".join(_fmt(float(x)) for x in v)


def format_dataset(ds: Dataset) -> str:
    h = ds.header
    lines = [
        f"HDR K={h.K} D={h.D} E={h.E} CMAX={_fmt(h.cmax)} MODELS={','.join(h.model_names)}"
    ]
    for i in range(len(ds)):
        lines.append(
            f"SMP id={ds.ids[i]} d={int(ds.domain_ids[i])} emb={_fmt_vec(ds.embeddings[i])} "
            f"feat={_fmt_vec(ds.features[i])} q={_fmt_vec(ds.quality[i])} c={_fmt_vec(ds.cost[i])}"
        )
    return "\n".join(lines) + "\n"


def write_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(format_dataset(ds), encoding="utf-8")


def _parse_fields(line: str, tag: str, lineno: int) -> dict[str, str]:
    parts = line.split(" ")
    if parts[0] != tag:
        raise DatasetError(f"line {lineno}: expected record tag {tag!r}, got {parts[0]!r}")
    out = {}
    for tok in parts[1:]:
        if not tok:
            continue
        key, sep, val = tok.partition("=")
        if not sep:
            raise DatasetError(f"line {lineno}: malformed field {tok!r}")
        out[key] = val
    return out


def _floats(s: str, n: int, what: str, lineno: int) -> list[float]:
    try:
        vals = [float(x) for x in s.split(",")] if s else []
    except ValueError as exc:
        raise DatasetError(f"line {lineno}: bad number in {what}: {exc}") from None
    if len(vals) != n:
        raise DatasetError(f"line {lineno}: {what} has {len(vals)} entries, expected {n}")
    return vals


def load_dataset(path: str | Path) -> Dataset:
    """Read and validate a dataset file.

    Raises :class:`DatasetError` with the offending line number on malformed
    records or dimension mismatches, and when the header CMAX disagrees with
    the data maximum by more than 1e-9 relative.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DatasetError("line 1: empty file")
    hf = _parse_fields(lines[0], "HDR", 1)
    try:
        K, D, E = int(hf["K"]), int(hf["D"]), int(hf["E"])
        cmax = float(hf["CMAX"])
        names = tuple(hf["MODELS"].split(","))
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"line 1: bad header: {exc}") from None
    if K < 1 or D < 1 or E < 1:
        raise DatasetError(f"line 1: K, D, E must be positive (got {K}, {D}, {E})")
    if len(names) != K:
        raise DatasetError(f"line 1: MODELS lists {len(names)} names for K={K}")

    ids, doms, embs, feats, qs, cs = [], [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        f = _parse_fields(line, "SMP", lineno)
        missing = {"id", "d", "emb", "feat", "q", "c"} - f.keys()
        if missing:
            raise DatasetError(f"line {lineno}: missing fields {sorted(missing)}")
        try:
            d = int(f["d"])
        except ValueError:
            raise DatasetError(f"line {lineno}: bad domain id {f['d']!r}") from None
        if not 0 <= d < D:
            raise DatasetError(f"line {lineno}: domain id {d} outside [0, {D})")
        q = _floats(f["q"], K, "q", lineno)
        c = _floats(f["c"], K, "c", lineno)
        if any(not 0.0 <= v <= 1.0 for v in q):
            raise DatasetError(f"line {lineno}: quality outside [0, 1]")
        if any(not (v >= 0.0 and math.isfinite(v)) for v in c):
            raise DatasetError(f"line {lineno}: negative or non-finite cost")
        ids.append(f["id"])
        doms.append(d)
        embs.append(_floats(f["emb"], E, "emb", lineno))
        feats.append(_floats(f["feat"], N_FEATURES, "feat", lineno))
        qs.append(q)
        cs.append(c)

    n = len(ids)
    ds = Dataset(
        header=Header(K, D, E, cmax, names),
        ids=ids,
        domain_ids=np.asarray(doms, dtype=np.int64).reshape(n),
        embeddings=np.asarray(embs, dtype=np.float64).reshape(n, E),
        features=np.asarray(feats, dtype=np.float64).reshape(n, N_FEATURES),
        quality=np.asarray(qs, dtype=np.float64).reshape(n, K),
        cost=np.asarray(cs, dtype=np.float64).reshape(n, K),
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# synthetic data

QUALITY_GAIN = 3.0
QUALITY_NOISE = 0.05
COST_BASE = 20.0
DOMAIN_TILT = 0.7
LENGTH_SLOPE = 0.4
LENGTH_NOISE = 0.5


def generate_synthetic(seed: int, n: int, K: int, D: int, E: int) -> Dataset:
    """Seeded stand-in for a routing benchmark with planted structure.

    Each domain owns a hidden unit "difficulty" direction in embedding space
    plus a scale and offset. A query's difficulty is
    ``offset_d + scale_d * <embedding, direction_d>``. Action ``a`` has
    capability on an even grid in [-0.5, 1.5] and expected quality
    ``sigmoid(3 * (capability_a - difficulty))``; observed quality adds
    small Gaussian noise. Offsets skew toward easy queries, so the cheapest
    model is a strong default. Raw cost grows with capability (cheapest action
    is 0, normalized cost roughly ``sqrt`` of the tier) and mildly with prompt
    length, so cheap models win on easy queries and stronger ones on hard
    queries.

    The noise-free reward-optimal action under unit cost penalty is stored
    in ``planted_best``.
    """
    if K < 1 or D < 1 or E < 2 or n < K:
        raise ValueError(f"invalid synthetic arguments n={n}, K={K}, D={D}, E={E}")
    rng = np.random.default_rng(seed)

    shared = rng.standard_normal(E)
    shared /= np.linalg.norm(shared)
    directions = shared[None, :] + DOMAIN_TILT * rng.standard_normal((D, E)) / np.sqrt(E)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = 0.7 * rng.standard_normal((D, E))
    scale = rng.uniform(0.8, 1.6, size=D)
    offset = rng.uniform(-1.3, -0.3, size=D)
    freq = rng.dirichlet(np.full(D, 2.0))

    doms = rng.choice(D, size=n, p=freq)
    emb = centers[doms] + rng.standard_normal((n, E))
    proj = np.einsum("ij,ij->i", emb, directions[doms])
    difficulty = offset[doms] + scale[doms] * proj

    # prompt length loosely tracks difficulty
    length = np.exp(4.0 + LENGTH_SLOPE * difficulty + LENGTH_NOISE * rng.standard_normal(n))
    features = np.column_stack([length / 100.0, np.log(length), freq[doms] * D])

    capability = np.linspace(-0.5, 1.5, K) if K > 1 else np.zeros(1)
    q_mean = 1.0 / (1.0 + np.exp(-QUALITY_GAIN * (capability[None, :] - difficulty[:, None])))
    quality = np.clip(q_mean + QUALITY_NOISE * rng.standard_normal((n, K)), 0.0, 1.0)

    tier = np.linspace(0.0, 1.0, K) if K > 1 else np.zeros(1)
    nominal_exp = 0.05 + 0.9 * np.sqrt(tier)
    len_factor = np.clip(0.9 + 0.05 * np.log(length / 50.0), 0.8, 1.1)
    cost = (1.0 + COST_BASE) ** (nominal_exp[None, :] * len_factor[:, None]) - 1.0

    cmax = float(cost.max())
    nominal_cost = (1.0 + COST_BASE) ** nominal_exp - 1.0
    nominal_cnorm = np.log1p(nominal_cost) / math.log1p(cmax)
    planted = np.argmax(q_mean * np.exp(-nominal_cnorm)[None, :], axis=1)

    header = Header(K, D, E, cmax, tuple(f"model{a}" for a in range(K)))
    ds = Dataset(
        header=header,
        ids=[f"s{i:06d}" for i in range(n)],
        domain_ids=doms.astype(np.int64),
        embeddings=emb,
        features=features,
        quality=quality,
        cost=cost,
        planted_best=planted,
    )
    ds.validate()
    return ds
