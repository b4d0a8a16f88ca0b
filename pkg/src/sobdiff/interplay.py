"""Alternating trajectory collection (cold and policy-warm-started solves) and policy training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from sobdiff import ddpm
from sobdiff.buffer import Buffer, TrajectoryRecord
from sobdiff.denoiser import Denoiser
from sobdiff.losses import TrainConfig, make_denoiser, make_direct_policy, train
from sobdiff.rollout import RolloutConfig, rollout_direct, rollout_policy
from sobdiff.sensitivity import step_matrices
from sobdiff.systems import NumericFailure, SystemSpec, TaskParams, interpolate_init, sample_task, trajectory_cost
from sobdiff.trajopt import SolveOptions, SolveResult, solve

log = logging.getLogger(__name__)

METHODS = ("sob_diff", "diff", "mlp", "sob_mlp", "to_only")


class _Reject:
    """Returned by argmin_cost when no solve converged."""

    def __repr__(self):
        return "Reject"

    def __bool__(self):
        return False


Reject = _Reject()


class CollectionAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class InterplayConfig:
    n_algo: int = 1
    n_traj: int | tuple = 30
    n_max: int = 1000
    reset_buffer: bool = True
    method: str = "sob_diff"
    train: TrainConfig = field(default_factory=TrainConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    n_eval: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_algo < 1:
            raise ValueError("n_algo must be >= 1")
        counts = self.n_traj if isinstance(self.n_traj, tuple) else (self.n_traj,)
        if min(counts) < 1:
            raise ValueError("n_traj must be >= 1")
        if isinstance(self.n_traj, tuple) and len(self.n_traj) != self.n_algo:
            raise ValueError("per-iteration n_traj needs one entry per iteration")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    def n_traj_at(self, it: int) -> int:
        return self.n_traj[it] if isinstance(self.n_traj, tuple) else self.n_traj

    @property
    def solve_options(self) -> SolveOptions:
        return SolveOptions(n_max=self.n_max)


@dataclass
class Attempt:
    cold_converged: bool
    cold_iters: int
    cold_cost: float
    warm_converged: bool | None = None
    warm_iters: int | None = None
    warm_cost: float | None = None
    chosen: str = "reject"


@dataclass
class CollectionStats:
    attempts: list = field(default_factory=list)

    @property
    def accepted(self) -> int:
        return sum(a.chosen != "reject" for a in self.attempts)

    @property
    def rejected(self) -> int:
        return sum(a.chosen == "reject" for a in self.attempts)

    @property
    def rejection_rate(self) -> float:
        n = len(self.attempts)
        return self.rejected / n if n else 0.0

    @property
    def cold_wins(self) -> int:
        return sum(a.chosen == "cold" for a in self.attempts)

    @property
    def warm_wins(self) -> int:
        return sum(a.chosen == "warmstart" for a in self.attempts)

    def iters(self, source: str) -> list[int]:
        if source == "cold":
            return [a.cold_iters for a in self.attempts]
        return [a.warm_iters for a in self.attempts if a.warm_iters is not None]

    def to_dict(self) -> dict:
        ic, iw = self.iters("cold"), self.iters("warmstart")
        return {"accepted": self.accepted, "rejected": self.rejected, "rejection_rate": self.rejection_rate,
                "cold_wins": self.cold_wins, "warm_wins": self.warm_wins,
                "mean_iters_cold": float(np.mean(ic)) if ic else None,
                "median_iters_cold": float(np.median(ic)) if ic else None,
                "mean_iters_warm": float(np.mean(iw)) if iw else None,
                "median_iters_warm": float(np.median(iw)) if iw else None,
                "mean_cost": float(np.mean([min(c for c in (a.cold_cost if a.cold_converged else None,
                                                            a.warm_cost if a.warm_converged else None)
                                                if c is not None)
                                            for a in self.attempts if a.chosen != "reject"]))
                if self.accepted else None}


def argmin_cost(res_cold: SolveResult, res_warm: SolveResult | None = None):
    """Lower-cost converged result, or Reject when neither converged."""
    cands = [r for r in (res_cold, res_warm) if r is not None and r.converged]
    if not cands:
        return Reject
    return min(cands, key=lambda r: r.cost)


def record_from_result(spec: SystemSpec, task: TaskParams, res: SolveResult, source: str) -> TrajectoryRecord:
    A, B = step_matrices(spec, res.X, res.U)
    return TrajectoryRecord(task, res.X, res.U, res.gains, A, B, res.cost, res.iters, source)


# ----------------------------------------------------------------------
def new_policy(method: str, buf: Buffer, cfg: TrainConfig, rng):
    if method in ("sob_diff", "diff"):
        return make_denoiser(buf, cfg, rng)
    if method in ("mlp", "sob_mlp"):
        return make_direct_policy(buf, cfg, rng)
    raise ValueError(f"method {method!r} has no policy")


def method_train_config(method: str, cfg: TrainConfig) -> TrainConfig:
    """The plain variants are the Sobolev ones with alpha_sob = 0."""
    if method in ("diff", "mlp"):
        return TrainConfig.from_dict(cfg.to_dict() | {"alpha_sob": 0.0})
    return cfg


def train_policy(method: str, buf: Buffer, cfg: TrainConfig, rng):
    cfg = method_train_config(method, cfg)
    pol = new_policy(method, buf, cfg, rng)
    return train(pol, buf, cfg, rng)


def policy_rollout(pol, spec: SystemSpec, task: TaskParams, rcfg: RolloutConfig, rng,
                   sched: ddpm.NoiseSchedule | None = None):
    """(X, U, failed) for either policy kind."""
    if isinstance(pol, Denoiser):
        X, U, trace = rollout_policy(pol, spec, task, rcfg, rng, sched)
        return X, U, trace.failed
    try:
        X, U = rollout_direct(pol, spec, task, rcfg)
    except NumericFailure:
        return None, None, True
    return X, U, False


def cold_solve(spec, task, opts: SolveOptions) -> SolveResult:
    X0, U0 = interpolate_init(spec, task)
    return solve(spec, task, X0, U0, opts)


def collect_iteration(spec: SystemSpec, buf: Buffer, n_traj: int, opts: SolveOptions, rng,
                      policy=None, rcfg: RolloutConfig | None = None) -> CollectionStats:
    """Sample xi, solve cold (and warm from the policy), keep the argmin until n_traj accepted."""
    stats = CollectionStats()
    rcfg = rcfg or RolloutConfig()
    sched = ddpm.make_schedule(policy.K) if isinstance(policy, Denoiser) else None
    budget = 10 * n_traj
    while stats.accepted < n_traj:
        task = sample_task(spec, rng)
        res_c = cold_solve(spec, task, opts)
        att = Attempt(res_c.converged, res_c.iters, res_c.cost)
        res_w = None
        if policy is not None:
            Xp, Up, failed = policy_rollout(policy, spec, task, rcfg, rng, sched)
            if not failed:
                res_w = solve(spec, task, Xp, Up, opts)
                att.warm_converged, att.warm_iters, att.warm_cost = res_w.converged, res_w.iters, res_w.cost
        best = argmin_cost(res_c, res_w)
        if best is Reject:
            att.chosen = "reject"
        else:
            att.chosen = "cold" if best is res_c else "warmstart"
            buf.insert(record_from_result(spec, task, best, att.chosen))
        stats.attempts.append(att)
        if len(stats.attempts) >= budget and stats.rejection_rate > 0.99:
            raise CollectionAborted(f"rejection rate {stats.rejection_rate:.3f} after "
                                    f"{len(stats.attempts)} attempts (budget {budget})")
    return stats


# ----------------------------------------------------------------------
@dataclass
class EvalInstance:
    policy_cost: float
    refined_cost: float
    refined_converged: bool
    refined_iters: int
    failed: bool


def eval_tasks(spec: SystemSpec, n: int, seed: int) -> list[TaskParams]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    return [sample_task(spec, rng) for _ in range(n)]


def evaluate_policy(pol, spec: SystemSpec, tasks, rcfg: RolloutConfig, opts: SolveOptions, rng,
                    refine: bool = True) -> list[EvalInstance]:
    sched = ddpm.make_schedule(pol.K) if isinstance(pol, Denoiser) else None
    out = []
    for task in tasks:
        X, U, failed = policy_rollout(pol, spec, task, rcfg, rng, sched)
        if failed:
            out.append(EvalInstance(np.inf, np.inf, False, opts.n_max, True))
            continue
        pc = trajectory_cost(spec, task, X, U)
        if refine:
            r = solve(spec, task, X, U, opts)
            out.append(EvalInstance(pc, r.cost, r.converged, r.iters, False))
        else:
            out.append(EvalInstance(pc, np.nan, False, 0, False))
    return out


def evaluate_cold(spec: SystemSpec, tasks, opts: SolveOptions) -> list[SolveResult]:
    return [cold_solve(spec, task, opts) for task in tasks]


METRIC_COLUMNS = ("iteration", "mean_policy_cost", "mean_refined_cost", "mean_cold_cost", "rejection_rate",
                  "median_iters_warm", "median_iters_cold", "warm_fail_rate", "cold_fail_rate",
                  "n_records", "final_train_loss")


@dataclass
class InterplayResult:
    metrics: list[dict]
    policy: object
    buffers: list[Buffer]
    stats: list[CollectionStats]
    evals: list[list[EvalInstance]]
    cold: list[SolveResult]
    losses: list[np.ndarray]


def run(spec: SystemSpec, cfg: InterplayConfig, on_iteration=None) -> InterplayResult:
    """n_algo rounds of collect -> train -> evaluate on a fixed held-out instance set."""
    if cfg.method == "to_only":
        raise ValueError("to_only has no learning loop")
    opts = cfg.solve_options
    ss = np.random.SeedSequence(cfg.seed)
    tasks = eval_tasks(spec, cfg.n_eval, cfg.seed)
    cold = evaluate_cold(spec, tasks, opts)
    cold_iters = [r.iters if r.converged else opts.n_max for r in cold]
    buf = Buffer(spec)
    policy = None
    result = InterplayResult([], None, [], [], [], cold, [])
    for it, child in enumerate(ss.spawn(cfg.n_algo)):
        r_col, r_train, r_eval = (np.random.default_rng(s) for s in child.spawn(3))
        if cfg.reset_buffer:
            buf = Buffer(spec)
        stats = collect_iteration(spec, buf, cfg.n_traj_at(it), opts, r_col, policy, cfg.rollout)
        policy, losses = train_policy(cfg.method, buf, cfg.train, r_train)
        ev = evaluate_policy(policy, spec, tasks, cfg.rollout, opts, r_eval)
        warm_iters = [e.refined_iters if e.refined_converged else opts.n_max for e in ev]
        row = {"iteration": it + 1,
               "mean_policy_cost": float(np.mean([e.policy_cost for e in ev])),
               "mean_refined_cost": float(np.mean([e.refined_cost for e in ev])),
               "mean_cold_cost": float(np.mean([r.cost for r in cold])),
               "rejection_rate": stats.rejection_rate,
               "median_iters_warm": float(np.median(warm_iters)),
               "median_iters_cold": float(np.median(cold_iters)),
               "warm_fail_rate": float(np.mean([not e.refined_converged for e in ev])),
               "cold_fail_rate": float(np.mean([not r.converged for r in cold])),
               "n_records": len(buf),
               "final_train_loss": float(losses[-1]) if len(losses) else float("nan")}
        log.info("iteration %d: %s", it + 1, row)
        result.metrics.append(row)
        result.buffers.append(buf)
        result.stats.append(stats)
        result.evals.append(ev)
        result.losses.append(losses)
        result.policy = policy
        if on_iteration is not None:
            on_iteration(it, row, policy, buf, stats)
    return result
