"""Run configuration, experiment commands and CSV/SVG artifacts.

Every command takes a RunConfig, writes under ``$SOBDIFF_OUT/<name>`` (default
``./runs/<name>``) and derives all randomness from (seed, purpose) pairs, so
reruns of the same config are byte-identical. Wall-clock columns are only
added when ``SOBDIFF_TIMING`` is set.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sobdiff import interplay as ip
from sobdiff.buffer import Buffer
from sobdiff.denoiser import Denoiser, DirectPolicy
from sobdiff.losses import TrainConfig
from sobdiff.rollout import RolloutConfig
from sobdiff.systems import SystemSpec, make_system
from sobdiff.trajopt import SolveOptions

log = logging.getLogger(__name__)

OUT_ENV = "SOBDIFF_OUT"
TIMING_ENV = "SOBDIFF_TIMING"
COST_CAP = 1e5
SCHEMA_VERSION = 1

# purposes for SeedSequence([seed, purpose, ...])
_COLLECT, _TRAIN, _EVAL, _INTERPLAY = 1, 2, 3, 4


@dataclass
class RunConfig:
    system: str = "pendulum"
    system_overrides: dict = field(default_factory=dict)
    method: str = "sob_diff"
    name: str = "run"
    seeds: tuple = (0, 1, 2, 3, 4)
    n_traj: int = 3
    n_eval: int = 50
    n_max: int = 1000
    n_algo: int = 5
    reset_buffer: bool = True
    n_traj_schedule: tuple | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    bench_n_traj: tuple = (3, 5, 8, 16, 32, 64)
    bench_methods: tuple = ("sob_diff", "diff", "mlp", "sob_mlp", "to_only")
    ta_sweep: tuple = (1, 2, 4, 8, 12, 15)
    k_sweep: tuple = (1, 2, 3, 4, 5)
    hist_bins: int = 20

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.method not in ip.METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {ip.METHODS}")
        bad = [m for m in self.bench_methods if m not in ip.METHODS]
        if bad:
            raise ValueError(f"unknown bench methods {bad}")
        self.bench_methods = tuple(self.bench_methods)
        self.bench_n_traj = tuple(int(n) for n in self.bench_n_traj)
        self.ta_sweep = tuple(int(n) for n in self.ta_sweep)
        self.k_sweep = tuple(int(n) for n in self.k_sweep)
        if self.n_traj_schedule is not None:
            self.n_traj_schedule = tuple(int(n) for n in self.n_traj_schedule)
        if self.n_traj < 1 or self.n_eval < 1 or self.n_max < 1 or self.hist_bins < 1:
            raise ValueError("n_traj, n_eval, n_max and hist_bins must be >= 1")
        self.rollout.check(self.train.T_h, self.train.K_train)
        make_system(self.system, **self.system_overrides)

    @property
    def spec(self) -> SystemSpec:
        return make_system(self.system, **self.system_overrides)

    @property
    def solve_options(self) -> SolveOptions:
        return SolveOptions(n_max=self.n_max)

    def interplay_config(self, seed: int) -> ip.InterplayConfig:
        n_traj = self.n_traj_schedule if self.n_traj_schedule is not None else self.n_traj
        return ip.InterplayConfig(n_algo=self.n_algo, n_traj=n_traj, n_max=self.n_max,
                                  reset_buffer=self.reset_buffer, method=self.method, train=self.train,
                                  rollout=self.rollout, n_eval=self.n_eval, seed=seed)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["train"] = self.train.to_dict()
        d["rollout"] = self.rollout.to_dict()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "rollout" in d:
            d["rollout"] = RolloutConfig(**d["rollout"])
        return cls(**d)


# desk-scale calibration per system, as dotted overrides on the defaults
PROFILES = {
    "pendulum": {"train.n_pl": 1000},
    "double_pendulum": {"n_max": 300, "train.T_h": 16, "train.T_a": 4, "rollout.T_a": 4, "train.n_pl": 3000,
                        "train.alpha_sob": 0.1, "train.hidden": [256, 256, 256], "reset_buffer": False,
                        "ta_sweep": [1, 2, 4, 6, 9, 12, 15], "n_traj": 30},
    "point_mass_2d": {"train.T_h": 16, "train.T_a": 15, "rollout.T_a": 15, "train.n_pl": 1000},
}


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Set leaf fields from ``key.sub=value`` strings (values parsed as JSON when possible)."""
    d = json.loads(json.dumps(d))
    items = overrides.items() if isinstance(overrides, dict) else (o.split("=", 1) for o in overrides)
    for key, value in items:
        if isinstance(value, str):
            value = parse_value(value)
        node = d
        *path, leaf = key.split(".")
        for p in path:
            if not isinstance(node.get(p), dict):
                raise ValueError(f"override {key!r}: {p!r} is not a config section")
            node = node[p]
        if leaf not in node:
            raise ValueError(f"override {key!r}: unknown field {leaf!r}")
        node[leaf] = value
    return d


def default_config(system: str = "pendulum", **fields) -> RunConfig:
    base = RunConfig(system=system).to_dict()
    base = apply_overrides(base, PROFILES.get(system, {}))
    base.update(fields)
    return RunConfig.from_dict(base)


def load_config(path=None, system: str | None = None, overrides=()) -> RunConfig:
    if path is not None:
        d = json.loads(Path(path).read_text())
        system = system or d.get("system", "pendulum")
        base = default_config(system).to_dict()
        base.update({k: v for k, v in d.items() if k not in ("train", "rollout")})
        for sect in ("train", "rollout"):
            base[sect].update(d.get(sect, {}))
    else:
        base = default_config(system or "pendulum").to_dict()
    return RunConfig.from_dict(apply_overrides(base, list(overrides)))


# ----------------------------------------------------------------------
def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def run_dir(cfg: RunConfig) -> Path:
    return out_root() / cfg.name


def seed_dir(cfg: RunConfig, seed: int) -> Path:
    return run_dir(cfg) / f"seed{seed}"


def rng_for(seed: int, *purpose) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *purpose]))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, d) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
    return path


def cap_cost(c: float) -> tuple[float, bool]:
    """Mean costs at or above the cap are stored as the cap plus an overflow flag."""
    if not math.isfinite(c) or c >= COST_CAP:
        return COST_CAP, True
    return float(c), False


def _timing() -> bool:
    return bool(os.environ.get(TIMING_ENV))


def iteration_histogram(iters, n_max: int, bins: int) -> list[tuple[float, float, int]]:
    """Counts of solver iterations over ``bins`` equal bins on [0, n_max]; failures sit at n_max."""
    edges = np.linspace(0.0, n_max, bins + 1)
    counts, _ = np.histogram(np.clip(np.asarray(iters, dtype=float), 0, n_max), bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def _hist_rows(base: dict, iters, cfg: RunConfig) -> list[dict]:
    return [dict(base, bin_lo=lo, bin_hi=hi, count=c) for lo, hi, c in
            iteration_histogram(iters, cfg.n_max, cfg.hist_bins)]


def _write_config(cfg: RunConfig) -> None:
    write_json(run_dir(cfg) / "config.json", dict(cfg.to_dict(), schema_version=SCHEMA_VERSION))


def policy_path(cfg: RunConfig, seed: int, method: str | None = None) -> Path:
    return seed_dir(cfg, seed) / f"policy_{method or cfg.method}.json"


def load_policy(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    kind = json.loads(path.read_text()).get("kind")
    return Denoiser.load(path) if kind == "denoiser" else DirectPolicy.load(path)


# ----------------------------------------------------------------------
STATS_KEYS = ("accepted", "rejected", "rejection_rate", "cold_wins", "warm_wins")


def cmd_collect(cfg: RunConfig) -> list[Path]:
    """Cold-only collection of n_traj records per seed."""
    _write_config(cfg)
    spec = cfg.spec
    out = []
    for seed in cfg.seeds:
        buf = Buffer(spec)
        stats = ip.collect_iteration(spec, buf, cfg.n_traj, cfg.solve_options, rng_for(seed, _COLLECT))
        d = seed_dir(cfg, seed)
        buf.save(d / "buffer.ndjson")
        write_json(d / "collect_stats.json", stats.to_dict())
        out.append(d / "buffer.ndjson")
        log.info("seed %d: %d records, rejection rate %.3f", seed, len(buf), stats.rejection_rate)
    return out


LOSS_COLUMNS = ("epoch", "loss")


def _train_one(cfg: RunConfig, buf: Buffer, seed: int, method: str, tag: int):
    return ip.train_policy(method, buf, cfg.train, rng_for(seed, _TRAIN, tag, ip.METHODS.index(method)))


def cmd_train(cfg: RunConfig) -> list[Path]:
    if cfg.method == "to_only":
        raise ValueError("to_only has nothing to train")
    _write_config(cfg)
    spec = cfg.spec
    out = []
    for seed in cfg.seeds:
        d = seed_dir(cfg, seed)
        path = d / "buffer.ndjson"
        if not path.exists():
            raise FileNotFoundError(f"missing buffer {path}; run collect first")
        buf = Buffer.load(path, spec)
        pol, losses = _train_one(cfg, buf, seed, cfg.method, len(buf))
        pol.save(policy_path(cfg, seed), extra={"seed": seed, "n_records": len(buf)})
        write_csv(d / f"losses_{cfg.method}.csv", LOSS_COLUMNS,
                  [{"epoch": i + 1, "loss": float(v)} for i, v in enumerate(losses)])
        out.append(policy_path(cfg, seed))
    return out


EVAL_COLUMNS = ("method", "seed", "n_traj", "n_instances", "mean_cost", "cost_overflow", "median_cost",
                "mean_refined_cost", "refined_overflow", "rollout_fail_rate", "converged_rate",
                "median_iters", "mean_iters")
INSTANCE_COLUMNS = ("method", "seed", "instance", "policy_cost", "policy_overflow", "refined_cost",
                    "refined_overflow", "converged", "iters", "rollout_failed")
HIST_COLUMNS = ("method", "seed", "iteration", "source", "bin_lo", "bin_hi", "count")
SWEEP_COLUMNS = ("method", "seed", "param", "value", "mean_policy_cost", "policy_overflow",
                 "mean_refined_cost", "median_iters", "mean_iters", "converged_rate", "generate_calls")


def _summary(method, seed, n_traj, pcost, rcost, conv, iters, failed) -> dict:
    mc, mo = cap_cost(float(np.mean(pcost)))
    rc, ro = cap_cost(float(np.mean(rcost)))
    return {"method": method, "seed": seed, "n_traj": n_traj, "n_instances": len(pcost),
            "mean_cost": mc, "cost_overflow": mo, "median_cost": min(float(np.median(pcost)), COST_CAP),
            "mean_refined_cost": rc, "refined_overflow": ro, "rollout_fail_rate": float(np.mean(failed)),
            "converged_rate": float(np.mean(conv)), "median_iters": float(np.median(iters)),
            "mean_iters": float(np.mean(iters))}


def evaluate_seed(cfg: RunConfig, seed: int, method: str, pol=None, rcfg: RolloutConfig | None = None,
                  refine: bool = True):
    """Per-instance (policy cost, refined cost, converged, iters, failed) on the seed's held-out set."""
    spec, opts = cfg.spec, cfg.solve_options
    tasks = ip.eval_tasks(spec, cfg.n_eval, seed)
    if method == "to_only":
        res = ip.evaluate_cold(spec, tasks, opts)
        return [(r.cost, r.cost, r.converged, r.iters if r.converged else opts.n_max, False) for r in res]
    ev = ip.evaluate_policy(pol, spec, tasks, rcfg or cfg.rollout, opts, rng_for(seed, _EVAL), refine=refine)
    return [(e.policy_cost, e.refined_cost if refine else e.policy_cost, e.refined_converged,
             e.refined_iters if e.refined_converged else opts.n_max, e.failed) for e in ev]


def cmd_eval(cfg: RunConfig, sweep: str | None = None) -> list[Path]:
    """Evaluate the method on n_eval held-out instances per seed, or sweep T_a / K_rollout."""
    if sweep is not None:
        return cmd_sweep(cfg, sweep)
    _write_config(cfg)
    rows, inst, hist = [], [], []
    for seed in cfg.seeds:
        pol = None if cfg.method == "to_only" else load_policy(policy_path(cfg, seed))
        n_traj = None if pol is None else _n_records(policy_path(cfg, seed))
        t0 = time.perf_counter()
        res = evaluate_seed(cfg, seed, cfg.method, pol)
        pc, rc, cv, it, fl = (list(c) for c in zip(*res))
        row = _summary(cfg.method, seed, n_traj, pc, rc, cv, it, fl)
        if _timing():
            row["wall_s"] = time.perf_counter() - t0
        rows.append(row)
        for i, (p, r, c, n, f) in enumerate(res):
            p_, po = cap_cost(p)
            r_, ro = cap_cost(r)
            inst.append({"method": cfg.method, "seed": seed, "instance": i, "policy_cost": p_, "policy_overflow": po,
                         "refined_cost": r_, "refined_overflow": ro, "converged": c, "iters": n,
                         "rollout_failed": f})
        src = "cold" if cfg.method == "to_only" else "warmstart"
        hist += _hist_rows({"method": cfg.method, "seed": seed, "iteration": 0, "source": src}, it, cfg)
    d = run_dir(cfg)
    cols = EVAL_COLUMNS + (("wall_s",) if _timing() else ())
    return [write_csv(d / f"eval_{cfg.method}.csv", cols, rows),
            write_csv(d / f"eval_{cfg.method}_instances.csv", INSTANCE_COLUMNS, inst),
            write_csv(d / f"hist_{cfg.method}.csv", HIST_COLUMNS, hist)]


def _n_records(path) -> int | None:
    return json.loads(Path(path).read_text()).get("extra", {}).get("n_records")


def cmd_sweep(cfg: RunConfig, param: str) -> list[Path]:
    """Re-evaluate each seed's checkpoint over T_a (``ta``) or K_rollout (``k``) values."""
    if param not in ("ta", "k"):
        raise ValueError(f"unknown sweep {param!r}; expected 'ta' or 'k'")
    if cfg.method in ("to_only", "mlp", "sob_mlp"):
        raise ValueError("sweeps apply to diffusion policies only")
    _write_config(cfg)
    values = cfg.ta_sweep if param == "ta" else cfg.k_sweep
    rows = []
    for seed in cfg.seeds:
        pol = load_policy(policy_path(cfg, seed))
        for v in values:
            field_name = "T_a" if param == "ta" else "K_rollout"
            rcfg = dataclasses.replace(cfg.rollout, **{field_name: v})
            t0 = time.perf_counter()
            res = evaluate_seed(cfg, seed, cfg.method, pol, rcfg, refine=(param == "ta"))
            pc = [r[0] for r in res]
            mc, mo = cap_cost(float(np.mean(pc)))
            iters = [r[3] for r in res]
            row = {"method": cfg.method, "seed": seed, "param": field_name, "value": v,
                   "mean_policy_cost": mc, "policy_overflow": mo,
                   "mean_refined_cost": cap_cost(float(np.mean([r[1] for r in res])))[0],
                   "median_iters": float(np.median(iters)) if param == "ta" else None,
                   "mean_iters": float(np.mean(iters)) if param == "ta" else None,
                   "converged_rate": float(np.mean([r[2] for r in res])) if param == "ta" else None,
                   "generate_calls": math.ceil(cfg.spec.T / rcfg.T_a)}
            if _timing():
                row["wall_s"] = time.perf_counter() - t0
            rows.append(row)
            log.info("seed %d %s=%d: %s", seed, field_name, v, row)
    cols = SWEEP_COLUMNS + (("wall_s",) if _timing() else ())
    return [write_csv(run_dir(cfg) / f"{param}_sweep_{cfg.method}.csv", cols, rows)]


INTERPLAY_COLUMNS = ("seed",) + ip.METRIC_COLUMNS + ("policy_overflow", "cold_wins", "warm_wins")
INTERPLAY_INSTANCE_COLUMNS = ("iteration",) + INSTANCE_COLUMNS


def cmd_interplay(cfg: RunConfig) -> list[Path]:
    """The alternating collect/train loop per seed, with buffer snapshots and iteration histograms."""
    if cfg.method == "to_only":
        raise ValueError("to_only has no learning loop")
    _write_config(cfg)
    spec = cfg.spec
    rows, hist, inst = [], [], []
    for seed in cfg.seeds:
        d = seed_dir(cfg, seed)

        def snapshot(it, row, policy, buf, stats, d=d):
            buf.save(d / f"buffer_it{it + 1}.ndjson")

        res = ip.run(spec, cfg.interplay_config(seed), on_iteration=snapshot)
        res.policy.save(policy_path(cfg, seed), extra={"seed": seed, "iterations": cfg.n_algo})
        cold_iters = [r.iters if r.converged else cfg.n_max for r in res.cold]
        hist += _hist_rows({"method": cfg.method, "seed": seed, "iteration": 0, "source": "cold"}, cold_iters, cfg)
        for row, ev, st in zip(res.metrics, res.evals, res.stats):
            capped, over = cap_cost(row["mean_policy_cost"])
            rows.append(dict(row, seed=seed, mean_policy_cost=capped, policy_overflow=over,
                             mean_refined_cost=cap_cost(row["mean_refined_cost"])[0],
                             cold_wins=st.cold_wins, warm_wins=st.warm_wins))
            warm = [e.refined_iters if e.refined_converged else cfg.n_max for e in ev]
            for i, e in enumerate(ev):
                p_, po = cap_cost(e.policy_cost)
                r_, ro = cap_cost(e.refined_cost)
                inst.append({"iteration": row["iteration"], "method": cfg.method, "seed": seed, "instance": i,
                             "policy_cost": p_, "policy_overflow": po, "refined_cost": r_, "refined_overflow": ro,
                             "converged": e.refined_converged, "iters": e.refined_iters,
                             "rollout_failed": e.failed})
            hist += _hist_rows({"method": cfg.method, "seed": seed, "iteration": row["iteration"],
                                "source": "warmstart"}, warm, cfg)
        write_csv(d / f"losses_{cfg.method}.csv", ("iteration",) + LOSS_COLUMNS,
                  [{"iteration": i + 1, "epoch": e + 1, "loss": float(v)}
                   for i, ls in enumerate(res.losses) for e, v in enumerate(ls)])
    rd = run_dir(cfg)
    return [write_csv(rd / f"interplay_{cfg.method}.csv", INTERPLAY_COLUMNS, rows),
            write_csv(rd / f"interplay_{cfg.method}_instances.csv", INTERPLAY_INSTANCE_COLUMNS, inst),
            write_csv(rd / f"hist_interplay_{cfg.method}.csv", HIST_COLUMNS, hist)]


BENCH_COLUMNS = ("method", "n_traj", "seed", "mean_cost", "cost_overflow", "median_cost", "rollout_fail_rate",
                 "n_records")
BENCH_SUMMARY_COLUMNS = ("method", "n_traj", "n_seeds", "mean_cost", "ci_lo", "ci_hi", "cost_overflow")


def confidence_interval(x, level: float = 0.95) -> tuple[float, float, float]:
    """Student-t interval of the mean over seeds."""
    from scipy import stats

    x = np.asarray(x, dtype=float)
    m = float(x.mean())
    if x.size < 2:
        return m, m, m
    h = float(stats.t.ppf(0.5 + level / 2, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size))
    return m, m - h, m + h


def cmd_bench(cfg: RunConfig) -> list[Path]:
    """Policy cost against dataset size for every method; nested cold datasets per seed."""
    _write_config(cfg)
    spec = cfg.spec
    n_big = max(cfg.bench_n_traj)
    rows = []
    for seed in cfg.seeds:
        d = seed_dir(cfg, seed)
        path = d / f"bench_buffer_{n_big}.ndjson"
        big = Buffer(spec)
        ip.collect_iteration(spec, big, n_big, cfg.solve_options, rng_for(seed, _COLLECT))
        big.save(path)
        base = None
        if "to_only" in cfg.bench_methods:
            res = evaluate_seed(cfg, seed, "to_only")
            base = [r[0] for r in res]
        for n in cfg.bench_n_traj:
            buf = Buffer(spec)
            buf.extend(big.records[:n])
            for method in cfg.bench_methods:
                if method == "to_only":
                    pc, failed = base, [False] * len(base)
                else:
                    pol, _ = _train_one(cfg, buf, seed, method, n)
                    res = evaluate_seed(cfg, seed, method, pol, refine=False)
                    pc, failed = [r[0] for r in res], [r[4] for r in res]
                mc, mo = cap_cost(float(np.mean(pc)))
                rows.append({"method": method, "n_traj": n, "seed": seed, "mean_cost": mc, "cost_overflow": mo,
                             "median_cost": min(float(np.median(pc)), COST_CAP),
                             "rollout_fail_rate": float(np.mean(failed)), "n_records": n})
                log.info("seed %d n_traj %d %s: %.1f", seed, n, method, mc)
    rd = run_dir(cfg)
    return [write_csv(rd / "bench.csv", BENCH_COLUMNS, rows),
            write_csv(rd / "bench_summary.csv", BENCH_SUMMARY_COLUMNS, bench_summary(rows))]


def bench_summary(rows) -> list[dict]:
    out = []
    keys = sorted({(r["method"], int(r["n_traj"])) for r in rows}, key=lambda k: (k[0], k[1]))
    for method, n in keys:
        costs = [float(r["mean_cost"]) for r in rows if r["method"] == method and int(r["n_traj"]) == n]
        m, lo, hi = confidence_interval(costs)
        out.append({"method": method, "n_traj": n, "n_seeds": len(costs), "mean_cost": min(m, COST_CAP),
                    "ci_lo": min(lo, COST_CAP), "ci_hi": min(hi, COST_CAP), "cost_overflow": m >= COST_CAP})
    return out


# ----------------------------------------------------------------------
PLOT_KINDS = {
    "bench_summary": ("method", "n_traj", "mean_cost", "ci_lo", "ci_hi"),
    "interplay": ("seed", "iteration", "mean_policy_cost", "mean_refined_cost", "mean_cold_cost"),
    "hist": ("source", "iteration", "bin_lo", "bin_hi", "count"),
    "sweep": ("param", "value", "mean_policy_cost", "median_iters"),
}
METHOD_COLORS = {"sob_diff": "tab:red", "diff": "tab:blue", "mlp": "tab:green", "sob_mlp": "tab:olive",
                 "to_only": "black"}


def plot_kind(path) -> str:
    name = Path(path).name
    for kind in ("bench_summary", "interplay", "hist", "sweep"):
        if name.startswith(kind) or (kind == "sweep" and "_sweep_" in name):
            return "hist" if name.startswith("hist") else kind
    raise ValueError(f"{path}: cannot tell the plot kind from the file name")


def _check_columns(path, header, kind) -> None:
    missing = [c for c in PLOT_KINDS[kind] if c not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing} for a {kind} plot")


def cmd_plot(paths, out_dir=None) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = []
    with matplotlib.rc_context({"svg.hashsalt": "sobdiff", "svg.fonttype": "none"}):
        for path in paths:
            path = Path(path)
            with open(path, newline="") as fh:
                reader = csv.DictReader(fh)
                header = reader.fieldnames or []
                rows = list(reader)
            kind = plot_kind(path)
            _check_columns(path, header, kind)
            fig = _PLOTTERS[kind](plt, rows)
            target = Path(out_dir or path.parent) / (path.stem + ".svg")
            target.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(target, format="svg", metadata={"Date": None})
            plt.close(fig)
            out.append(target)
    return out


def _plot_bench(plt, rows):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted({r["method"] for r in rows}):
        rs = sorted((r for r in rows if r["method"] == method), key=lambda r: int(r["n_traj"]))
        n = [int(r["n_traj"]) for r in rs]
        m = np.array([float(r["mean_cost"]) for r in rs])
        lo = np.array([float(r["ci_lo"]) for r in rs])
        hi = np.array([float(r["ci_hi"]) for r in rs])
        c = METHOD_COLORS.get(method)
        ax.plot(n, m, "o-", color=c, label=method)
        ax.fill_between(n, lo, hi, color=c, alpha=0.2, linewidth=0)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("trajectories in dataset")
    ax.set_ylabel("mean cost")
    if rows:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def _plot_interplay(plt, rows):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    its = sorted({int(r["iteration"]) for r in rows})
    for col, c in (("mean_policy_cost", "tab:red"), ("mean_refined_cost", "tab:purple"),
                   ("mean_cold_cost", "black")):
        m = [np.mean([float(r[col]) for r in rows if int(r["iteration"]) == i]) for i in its]
        ax.plot(its, m, "o-", color=c, label=col.replace("mean_", "").replace("_", " "))
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean cost")
    if rows:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def _plot_hist(plt, rows):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    groups = sorted({(r["source"], int(r["iteration"])) for r in rows})
    last_warm = max((g for g in groups if g[0] == "warmstart"), default=None, key=lambda g: g[1])
    for g, c in ((("cold", 0), "black"), (last_warm, "tab:red")):
        if g is None or g not in groups:
            continue
        rs = [r for r in rows if (r["source"], int(r["iteration"])) == g]
        lo = np.array([float(r["bin_lo"]) for r in rs])
        hi = np.array([float(r["bin_hi"]) for r in rs])
        edges = np.unique(np.concatenate([lo, hi]))
        counts = np.zeros(len(edges) - 1)
        for a, n in zip(lo, (float(r["count"]) for r in rs)):
            counts[np.searchsorted(edges, a)] += n
        ax.stairs(counts, edges, color=c, label=f"{g[0]} (it {g[1]})" if g[1] else g[0])
    ax.set_xlabel("solver iterations")
    ax.set_ylabel("instances")
    if rows:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def _plot_sweep(plt, rows):
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    vals = sorted({int(r["value"]) for r in rows})
    cost = [np.mean([float(r["mean_policy_cost"]) for r in rows if int(r["value"]) == v]) for v in vals]
    a1.plot(vals, cost, "o-", color="tab:red")
    it = [[float(r["median_iters"]) for r in rows if int(r["value"]) == v and r["median_iters"]] for v in vals]
    pts = [(v, np.mean(i)) for v, i in zip(vals, it) if i]
    if pts:
        a2.plot(*zip(*pts), "o-", color="tab:purple")
    param = rows[0]["param"] if rows else "value"
    a1.set_xlabel(param)
    a1.set_ylabel("mean policy cost")
    a2.set_xlabel(param)
    a2.set_ylabel("median refine iterations")
    fig.tight_layout()
    return fig


_PLOTTERS = {"bench_summary": _plot_bench, "interplay": _plot_interplay, "hist": _plot_hist,
             "sweep": _plot_sweep}
