"""Receding-horizon execution of diffusion and direct policies on the true dynamics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from sobdiff import _kernels as kern
from sobdiff import ddpm
from sobdiff.buffer import NormStats
from sobdiff.systems import SystemSpec, TaskParams, angle_shift, clamp, step


@dataclass(frozen=True)
class RolloutConfig:
    T_a: int = 31
    T_o: int = 1
    K_rollout: int = 5
    Kp: float = 50.0
    Kd: float = 10.0
    # "exact": inverse dynamics onto the desired velocity plus a position correction;
    # "pd": plain Kp/Kd feedback on the state error
    inverse: str = "exact"
    clip: bool = False

    def __post_init__(self):
        if self.T_a < 1 or self.T_o < 1 or self.K_rollout < 1:
            raise ValueError("T_a, T_o and K_rollout must be >= 1")
        if self.inverse not in ("exact", "pd"):
            raise ValueError(f"unknown inverse mode {self.inverse!r}")

    def check(self, T_h: int, K: int) -> None:
        if self.T_a > T_h - self.T_o:
            raise ValueError(f"T_a={self.T_a} exceeds T_h - T_o = {T_h - self.T_o}")
        if self.K_rollout > K:
            raise ValueError(f"K_rollout={self.K_rollout} exceeds K={K}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RolloutTrace:
    generate_calls: int = 0
    denoiser_evals: int = 0
    failed: bool = False
    message: str = ""
    starts: list = field(default_factory=list)


def inverse_control(spec: SystemSpec, x, a_des, Kp: float = 50.0, Kd: float = 10.0,
                    mode: str = "exact") -> np.ndarray:
    """Control that drives x towards the desired next state ``a_des`` (clamped).

    All in-scope systems are fully actuated and the velocity update of the
    semi-implicit step is affine in u, so the exact mode solves for the
    velocity v_des + dt Kp (q_des - q - dt v_des); on a dynamically consistent
    target the correction vanishes and tracking is exact.
    """
    x = np.asarray(x, dtype=float)
    a_des = np.asarray(a_des, dtype=float)
    nq = spec.n_q
    q, v = x[:nq], x[nq:]
    q_des, v_des = a_des[:nq], a_des[nq:]
    if mode == "pd":
        return clamp(spec, Kp * (q_des - q) + Kd * (v_des - v))
    x0, _, B = kern.step_jacobians(spec.sys_id, spec.phys_params(), x, np.zeros(spec.n_u))
    v_target = v_des + spec.dt * Kp * (q_des - q - spec.dt * v_des)
    u = np.linalg.solve(B[nq:], v_target - x0[nq:])
    return clamp(spec, u)


def _norm(den) -> NormStats:
    return den.norm if isinstance(den.norm, NormStats) else NormStats.from_dict(den.norm)


def rollout_policy(den, spec: SystemSpec, task: TaskParams, cfg: RolloutConfig,
                   rng: np.random.Generator, sched: ddpm.NoiseSchedule | None = None):
    """Play T steps: sample a chunk, apply up to T_a of its actions, replan.

    Returns (X, U, trace) with U the applied (clamped) controls, so X is
    reproduced exactly by re-simulating U. On a numeric failure the rest of
    the horizon is filled with zero controls and ``trace.failed`` is set.
    """
    sched = sched or ddpm.make_schedule(den.K)
    cfg.check(den.T_h, sched.K)
    norm = _norm(den)
    T, T_o, n_x, n_u = spec.T, cfg.T_o, spec.n_x, spec.n_u
    X = np.zeros((T + 1, n_x))
    U = np.zeros((T, n_u))
    X[0] = task.x_init
    xi_n = norm.norm_xi(task.features())
    trace = RolloutTrace()
    t = 0
    while t < T:
        # history rows: repeat x_0 and use zero controls before the episode starts
        rows = [max(s, 0) for s in range(t - T_o + 1, t + 1)]
        u_prev = np.array([U[s - 1] if s >= 1 else np.zeros(n_u) for s in range(t - T_o + 1, t + 1)])
        shift = angle_shift(spec, X[t])
        obs = np.hstack([X[rows] + shift, u_prev])
        if spec.action_mode == "u":
            a_hist = np.array([U[s] if s >= 0 else np.zeros(n_u) for s in range(t - T_o, t)])
        else:
            a_hist = X[rows] + shift
        trace.starts.append(t)
        try:
            tau_n = ddpm.generate(den, sched, xi_n, norm.norm_obs(obs), norm.norm_action(a_hist),
                                  cfg.K_rollout, rng, clip=cfg.clip)
        except Exception as err:  # numeric failure or bad net output
            trace.failed = True
            trace.message = str(err)
            for s in range(t, T):
                X[s + 1] = step(spec, X[s], U[s]) if np.all(np.isfinite(X[s])) else X[s]
            break
        trace.generate_calls += 1
        trace.denoiser_evals += cfg.K_rollout
        tau = norm.denorm_action(tau_n)
        for s in range(T_o, T_o + cfg.T_a):
            if t >= T:
                break
            if spec.action_mode == "u":
                u = clamp(spec, tau[s])
            else:
                u = inverse_control(spec, X[t], tau[s] - shift, cfg.Kp, cfg.Kd, cfg.inverse)
            U[t] = u
            X[t + 1] = step(spec, X[t], u)
            t += 1
    return X, U, trace


def rollout_direct(pol, spec: SystemSpec, task: TaskParams, cfg: RolloutConfig | None = None):
    """u_t from the direct policy at every step (or inverse control onto its next-state output)."""
    cfg = cfg or RolloutConfig()
    norm = _norm(pol)
    n_x = spec.n_x
    xo, xs = norm.obs.offset[:n_x], norm.obs.scale[:n_x]
    if spec.action_mode == "u":
        ao, as_ = norm.action.offset, norm.action.scale
    else:
        ao, as_ = xo, xs
    xi_n = norm.norm_xi(task.features())
    X = np.zeros((spec.T + 1, n_x))
    U = np.zeros((spec.T, spec.n_u))
    X[0] = task.x_init
    for t in range(spec.T):
        shift = angle_shift(spec, X[t])
        a = pol((X[t] + shift - xo) / xs, xi_n) * as_ + ao
        if spec.action_mode == "u":
            u = clamp(spec, a)
        else:
            u = inverse_control(spec, X[t], a - shift, cfg.Kp, cfg.Kd, cfg.inverse)
        U[t] = u
        X[t + 1] = step(spec, X[t], u)
    return X, U
