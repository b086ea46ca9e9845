"""Command-line entry point: ``ucbroute {gen,run,compare,validate}``.

Run configuration is a flat ``key=value`` text file with dotted keys. Every
key can also be given as a flag (``--ucb.beta 2``), which overrides the file.
``run`` writes a resolved snapshot with all defaults filled in; feeding that
snapshot back reproduces the run byte for byte.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .data import DatasetError, clamp_counter, generate_synthetic, load_dataset, write_dataset
from .harness import (
    POLICY_KINDS,
    WARMSTART_MODES,
    PolicySpec,
    ProtocolConfig,
    TrainConfig,
    compare_runs,
    run_protocol,
    write_decisions_csv,
    write_domain_csv,
    write_metrics_csv,
)
from .reward import RewardParams
from .utilitynet import save_checkpoint

__all__ = ["ConfigError", "RunConfig", "parse_config_text", "resolve_config", "main"]

log = logging.getLogger("ucbroute")

OUTPUT_ROOT_ENV = "UCBROUTE_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass(frozen=True)
class Field:
    key: str
    type: type
    default: object
    note: str = ""  # "paper-unspecified" marks values the method leaves open
    check: object = None  # (predicate, message)


_pos = (lambda v: v > 0, "must be > 0")
_nonneg = (lambda v: v >= 0, "must be >= 0")
_ge1 = (lambda v: v >= 1, "must be >= 1")
UNSPEC = "paper-unspecified"

FIELDS = [
    Field("dataset.path", str, ""),
    Field("synthetic.seed", int, 1, UNSPEC),
    Field("synthetic.n", int, 2000, UNSPEC, _ge1),
    Field("synthetic.K", int, 5, UNSPEC, _ge1),
    Field("synthetic.D", int, 8, UNSPEC, _ge1),
    Field("synthetic.E", int, 8, UNSPEC, (lambda v: v >= 2, "must be >= 2")),
    Field("policy.kind", str, "neural_ucb", "", (lambda v: v in POLICY_KINDS, f"must be one of {POLICY_KINDS}")),
    Field("ucb.beta", float, 1.0, "", _nonneg),
    Field("ucb.lambda0", float, 1.0, "", _pos),
    Field("ucb.tau_g", float, 0.5, UNSPEC),
    Field("reward.lambda", float, 1.0, UNSPEC, _nonneg),
    Field("protocol.slices", int, 20, "", _ge1),
    Field("protocol.epochs", int, 5, "", _nonneg),
    Field("protocol.seed", int, 0, UNSPEC),
    Field("protocol.warmstart", str, WARMSTART_MODES[0], UNSPEC,
          (lambda v: v in WARMSTART_MODES, f"must be one of {WARMSTART_MODES}")),
    Field("train.lr", float, 1e-3, "", _pos),
    Field("train.batch_size", int, 256, UNSPEC, _ge1),
    Field("train.huber_delta", float, 1.0, UNSPEC, _pos),
    Field("train.gate_weight", float, 1.0, UNSPEC, _nonneg),
    Field("train.gate_margin", float, 0.05, UNSPEC),
    Field("output.dir", str, ""),
]
FIELD_BY_KEY = {f.key: f for f in FIELDS}


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_BY_KEY:
            raise ConfigError(key, "unknown config key")
        out[key] = value
    return out


def _convert(f: Field, raw: str):
    try:
        v = f.type(raw)
    except ValueError:
        raise ConfigError(f.key, f"expected {f.type.__name__}, got {raw!r}") from None
    if f.check is not None and raw != "":
        pred, msg = f.check
        if not pred(v):
            raise ConfigError(f.key, f"{msg}, got {raw!r}")
    return v


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def synthetic(self) -> bool:
        return not self.values["dataset.path"]

    def snapshot(self) -> str:
        """Resolved config text; every value materialized."""
        lines = ["# resolved run configuration"]
        for f in FIELDS:
            if self.synthetic and f.key == "dataset.path":
                continue
            if not self.synthetic and f.key.startswith("synthetic."):
                continue
            v = self.values[f.key]
            text = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.key}={text}" + (f"  # {f.note}" if f.note else ""))
        return "\n".join(lines) + "\n"


def resolve_config(raw: dict[str, str]) -> RunConfig:
    """Fill defaults and validate. A dataset source is mandatory: either
    ``dataset.path`` or at least one ``synthetic.*`` key."""
    has_path = bool(raw.get("dataset.path", ""))
    has_syn = any(k.startswith("synthetic.") for k in raw)
    if not has_path and not has_syn:
        raise ConfigError("dataset.path", "required (or give synthetic.* keys for a generated dataset)")
    if has_path and has_syn:
        raise ConfigError("dataset.path", "give either dataset.path or synthetic.* keys, not both")
    values = {}
    for f in FIELDS:
        values[f.key] = _convert(f, raw[f.key]) if f.key in raw else f.default
    if has_path and not Path(values["dataset.path"]).is_file():
        raise ConfigError("dataset.path", f"no such file {values['dataset.path']!r}")
    if not values["output.dir"]:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        values["output.dir"] = str(Path(root) / values["policy.kind"])
    return RunConfig(values)


def default_template() -> str:
    lines = ["# ucbroute run configuration (flat key=value)",
             "# set dataset.path, or use the synthetic.* keys"]
    for f in FIELDS:
        lines.append(f"{f.key}={f.default}" + (f"  # {f.note}" if f.note else ""))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    if args.print_config:
        sys.stdout.write(default_template())
        return EXIT_OK
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"no such file {args.config!r}")
        raw = parse_config_text(path.read_text(), str(path))
    for key in FIELD_BY_KEY:
        v = getattr(args, key)
        if v is not None:
            raw[key] = v
    cfg = resolve_config(raw)

    if cfg.synthetic:
        s = {k: cfg[f"synthetic.{k}"] for k in ("seed", "n", "K", "D", "E")}
        if s["n"] < s["K"]:
            raise ConfigError("synthetic.n", f"must be >= synthetic.K ({s['K']})")
        ds = generate_synthetic(**s)
    else:
        ds = load_dataset(cfg["dataset.path"])
    if cfg["protocol.slices"] > len(ds):
        raise ConfigError("protocol.slices", f"{cfg['protocol.slices']} slices for {len(ds)} samples")

    policy = PolicySpec(cfg["policy.kind"], cfg["ucb.beta"], cfg["ucb.lambda0"], cfg["ucb.tau_g"])
    protocol = ProtocolConfig(cfg["protocol.slices"], cfg["protocol.epochs"], cfg["protocol.seed"],
                              cfg["protocol.warmstart"])
    train = TrainConfig(cfg["train.lr"], cfg["train.batch_size"], cfg["train.huber_delta"],
                        cfg["train.gate_weight"], cfg["train.gate_margin"])
    clamp_counter.reset()
    res = run_protocol(ds, policy, protocol, RewardParams(cfg["reward.lambda"]), train)

    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.snapshot())
    write_metrics_csv(res.metrics, out / "metrics.csv")
    write_domain_csv(res.metrics, out / "domains.csv")
    write_decisions_csv(res.decisions, out / "decisions.csv")
    sim = res.simulator
    if sim.params is not None:
        save_checkpoint(sim.params, sim.opt, out / "checkpoint.npz")
    last = res.metrics[-1]
    print(f"{policy.kind}: {len(res.metrics)} slices, final avg_reward={last.avg_reward:.4f} "
          f"avg_cost={last.avg_cost:.4g} cum_reward={last.cum_reward:.2f} -> {out}")
    if clamp_counter.count:
        log.warning("%d costs above CMAX were clamped", clamp_counter.count)
    return EXIT_OK


def cmd_gen(args) -> int:
    for name in ("n", "K", "D"):
        if getattr(args, name) < 1:
            raise ConfigError(name, "must be >= 1")
    if args.E < 2:
        raise ConfigError("E", "must be >= 2")
    if args.n < args.K:
        raise ConfigError("n", f"must be >= K ({args.K})")
    ds = generate_synthetic(args.seed, args.n, args.K, args.D, args.E)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    print(f"wrote {len(ds)} samples (K={args.K}, D={args.D}, E={args.E}) to {out}")
    return EXIT_OK


def _metrics_path(p: str) -> Path:
    path = Path(p)
    path = path / "metrics.csv" if path.is_dir() else path
    if not path.is_file():
        raise ConfigError("runs", f"no metrics file at {path}")
    return path


def cmd_compare(args) -> int:
    paths = [_metrics_path(p) for p in args.runs]
    names = args.names.split(",") if args.names else [p.parent.name or p.stem for p in paths]
    if len(names) != len(paths):
        raise ConfigError("names", f"{len(names)} names for {len(paths)} runs")
    cmp = compare_runs(paths, names)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "slice", "metric", "value"])
        for run, s, m, v in cmp.long_rows():
            w.writerow([run, s, m, "%.17g" % v])
    finally:
        if args.out:
            fh.close()
    summary = sys.stdout if args.out else sys.stderr
    final = cmp.final()
    cols = [m for m in ("avg_reward", "avg_cost", "avg_quality", "cum_reward") if m in cmp.metrics]
    width = max(len(r) for r in cmp.runs)
    print(f"final slice {cmp.slices[-1]} (slice 1 is warm-start affected)", file=summary)
    print(f"{'run':<{width}}  " + "  ".join(f"{c:>12}" for c in cols), file=summary)
    for r in cmp.runs:
        print(f"{r:<{width}}  " + "  ".join(f"{final[r][c]:>12.6g}" for c in cols), file=summary)
    return EXIT_OK


def cmd_validate(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise ConfigError("path", f"no such file {args.path!r}")
    try:
        ds = load_dataset(path)
    except DatasetError as exc:
        print(f"{path}: INVALID: {exc}")
        return EXIT_RUNTIME
    h = ds.header
    print(f"{path}: ok, {len(ds)} samples, K={h.K} D={h.D} E={h.E} CMAX={h.cmax:.6g} "
          f"models={','.join(h.model_names)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ucbroute", description="Cost-aware LLM routing with NeuralUCB.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a seeded synthetic dataset")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--K", type=int, default=5)
    g.add_argument("--D", type=int, default=8)
    g.add_argument("--E", type=int, default=8)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="replay one policy over a dataset stream")
    r.add_argument("config", nargs="?", help="flat key=value config file")
    r.add_argument("--print-config", action="store_true", help="print the default template and exit")
    for f in FIELDS:
        r.add_argument(f"--{f.key}", dest=f.key, metavar=f.type.__name__.upper(), default=None)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="join metrics of several runs into long CSV")
    c.add_argument("runs", nargs="+", help="run directories or metrics.csv files")
    c.add_argument("--names", help="comma-separated run names")
    c.add_argument("--out", help="CSV path (default: stdout; summary then goes to stderr)")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate", help="lint a dataset file")
    v.add_argument("path")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any module failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
