"""iLQR trajectory optimisation with feedback gains, plus a Riccati oracle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sobdiff import _kernels as kern
from sobdiff.systems import SystemSpec, TaskParams, cost_params

STATUS_NAMES = {kern.STATUS_CONVERGED: "converged", kern.STATUS_MAX_ITER: "max_iter",
                kern.STATUS_NONFINITE: "nonfinite", kern.STATUS_REG_SATURATED: "reg_saturated"}


@dataclass(frozen=True)
class SolveOptions:
    n_max: int = 1000
    cost_tol: float = 1e-7
    grad_tol: float = 1e-9
    reg_init: float = 1e-6
    reg_min: float = 1e-8
    reg_max: float = 1e8
    ls_max_steps: int = 20
    ls_backtrack: float = 0.5
    armijo: float = 1e-4

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.cost_tol <= 0 or self.grad_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.ls_backtrack < 1:
            raise ValueError("ls_backtrack must lie in (0, 1)")
        if not 0 < self.reg_min <= self.reg_max:
            raise ValueError("need 0 < reg_min <= reg_max")


@dataclass
class SolveResult:
    X: np.ndarray
    U: np.ndarray
    gains: np.ndarray
    cost: float
    iters: int
    converged: bool
    ls_failures: int
    status: str = "converged"
    cost_history: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class LQRProblem:
    """Finite-horizon LQR with cost sum x'Qx + u'Ru + x_T' Q_T x_T."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Q_T: np.ndarray
    T: int

    def __post_init__(self):
        for name in ("Q", "R", "Q_T"):
            M = getattr(self, name)
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be positive definite")
        if min(np.linalg.eigvalsh(self.Q).min(), np.linalg.eigvalsh(self.Q_T).min()) < -1e-12:
            raise ValueError("Q and Q_T must be positive semidefinite")

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]


def _run(sys_id, p, cp, obs, x0, X0, U0, u_max, opts: SolveOptions) -> SolveResult:
    X0 = np.ascontiguousarray(X0, dtype=float)
    U0 = np.ascontiguousarray(U0, dtype=float)
    x0 = np.ascontiguousarray(x0, dtype=float)
    if X0.shape != (U0.shape[0] + 1, x0.size):
        raise ValueError(f"X0 shape {X0.shape} inconsistent with U0 {U0.shape}")
    X, U, K, J, iters, status, lsf, hist = kern.ilqr(
        sys_id, p, cp, obs, x0, X0, U0, float(u_max), opts.n_max, opts.cost_tol, opts.grad_tol,
        opts.reg_init, opts.reg_min, opts.reg_max, opts.ls_max_steps, opts.ls_backtrack, opts.armijo)
    return SolveResult(X=X, U=U, gains=K, cost=float(J), iters=int(iters),
                       converged=status == kern.STATUS_CONVERGED, ls_failures=int(lsf),
                       status=STATUS_NAMES[int(status)], cost_history=hist)


def solve(spec: SystemSpec, task: TaskParams, X0, U0, opts: SolveOptions | None = None) -> SolveResult:
    """Optimise from the guess (X0, U0); the horizon is ``len(U0)``.

    The returned trajectory always starts at ``task.x_init`` and satisfies
    ``X[t+1] = step(X[t], clamp(U[t]))``. Non-finite blow-ups and saturated
    regularisation come back as ``converged=False`` with ``status`` set.
    """
    opts = opts or SolveOptions()
    obs = np.ascontiguousarray(np.asarray(task.obstacles, dtype=float).reshape(-1, 3))
    return _run(spec.sys_id, spec.phys_params(), cost_params(spec, task), obs,
                task.x_init, X0, U0, spec.u_max, opts)


def solve_lqr(prob: LQRProblem, x0, U0=None, opts: SolveOptions | None = None) -> SolveResult:
    """Run the same iLQR code on a linear-quadratic problem."""
    opts = opts or SolveOptions()
    x0 = np.asarray(x0, dtype=float)
    if U0 is None:
        U0 = np.zeros((prob.T, prob.n_u))
    p = np.concatenate([prob.A.ravel(), prob.B.ravel()]).astype(float)
    cp = np.concatenate([prob.Q.ravel(), prob.R.ravel(), prob.Q_T.ravel()]).astype(float)
    X0 = kern.simulate(kern.LINEAR, p, x0, np.asarray(U0, dtype=float), np.inf)
    return _run(kern.LINEAR, p, cp, np.zeros((0, 3)), x0, X0, U0, np.inf, opts)


def riccati_reference(prob: LQRProblem) -> tuple[np.ndarray, np.ndarray]:
    """Backward Riccati recursion: gains K_t (T, n_u, n_x) and cost-to-go P_t (T+1, n_x, n_x)."""
    A, B, Q, R = prob.A, prob.B, prob.Q, prob.R
    P = np.empty((prob.T + 1, prob.n_x, prob.n_x))
    K = np.empty((prob.T, prob.n_u, prob.n_x))
    P[prob.T] = prob.Q_T
    for t in range(prob.T - 1, -1, -1):
        Pn = P[t + 1]
        S = R + B.T @ Pn @ B
        try:
            K[t] = -np.linalg.solve(S, B.T @ Pn @ A)
        except np.linalg.LinAlgError as err:
            raise np.linalg.LinAlgError(f"R + B'PB singular at t={t}") from err
        Pt = Q + A.T @ Pn @ A + A.T @ Pn @ B @ K[t]
        P[t] = 0.5 * (Pt + Pt.T)
    return K, P
