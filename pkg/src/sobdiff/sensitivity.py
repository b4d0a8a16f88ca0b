"""Closed-loop sensitivities chained into chunk-level derivative targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sobdiff import _kernels as kern
from sobdiff.systems import SystemSpec


@dataclass
class ClosedLoopJacobians:
    """Per-step closed-loop maps along one trajectory.

    ``Phi[t] = dx_{t+1}/dx_t`` for t in [0, T-1]. ``D[t] = da_t/dx_t``: the
    feedback gain when actions are controls (T entries), the identity when
    actions are states (T + 1 entries).
    """

    Phi: np.ndarray
    D: np.ndarray
    action_mode: str = "u"

    @property
    def T(self) -> int:
        return self.Phi.shape[0]


def closed_loop_from_matrices(A, B, K, action_mode: str = "u") -> ClosedLoopJacobians:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    K = np.asarray(K, dtype=float)
    Phi = A + B @ K
    if action_mode == "u":
        D = K.copy()
    else:
        n_x = A.shape[1]
        D = np.broadcast_to(np.eye(n_x), (A.shape[0] + 1, n_x, n_x)).copy()
    return ClosedLoopJacobians(Phi, D, action_mode)


def step_matrices(spec: SystemSpec, X, U) -> tuple[np.ndarray, np.ndarray]:
    """Analytic A_t, B_t along a trajectory (at the raw, unclamped controls)."""
    p = spec.phys_params()
    T = len(U)
    A = np.empty((T, spec.n_x, spec.n_x))
    B = np.empty((T, spec.n_x, spec.n_u))
    for t in range(T):
        _, A[t], B[t] = kern.step_jacobians(spec.sys_id, p, np.asarray(X[t], float), np.asarray(U[t], float))
    return A, B


def closed_loop_jacobians(spec: SystemSpec, result) -> ClosedLoopJacobians:
    """Phi_t = A_t + B_t K_t from a solver result (anything with X, U, gains)."""
    A, B = step_matrices(spec, result.X, result.U)
    return closed_loop_from_matrices(A, B, result.gains, spec.action_mode)


def chunk_jacobian(jac: ClosedLoopJacobians, t1: int, T_h: int, T_o: int, lag: int = 0) -> np.ndarray:
    """Stacked d a_{t1:t1+T_h-1} / d x_{t1+lag : t1+lag+T_o-1}.

    Block (h, o) is ``D_s Phi_{s-1} ... Phi_{s'}`` with ``s = t1 + h`` and
    ``s' = t1 + lag + o``; it is the identity-composed ``D_s`` when s = s' and
    zero when s < s' since later states cannot move earlier actions. ``lag=1``
    pairs control rows u_{t-1}, u_t, ... with state columns x_t, ... .
    """
    n_a = jac.D.shape[1]
    n_x = jac.Phi.shape[1]
    if T_o < 1 or T_h < 1 or t1 < 0 or lag < 0:
        raise ValueError("need T_o, T_h >= 1 and t1, lag >= 0")
    if t1 + T_h - 1 >= jac.D.shape[0]:
        raise ValueError(f"window [{t1}, {t1 + T_h - 1}] exceeds trajectory with {jac.D.shape[0]} actions")
    if t1 + lag + T_o - 1 > jac.T:
        raise ValueError("history window exceeds trajectory")
    J = np.zeros((T_h * n_a, T_o * n_x))
    for o in range(T_o):
        s0 = t1 + lag + o
        M = np.eye(n_x)
        for s in range(s0, t1 + T_h):
            h = s - t1
            J[h * n_a:(h + 1) * n_a, o * n_x:(o + 1) * n_x] = jac.D[s] @ M
            if s < jac.T:
                M = jac.Phi[s] @ M
    return J


def tail_resolve_errors(spec: SystemSpec, task, result, t: int, direction, hs, opts=None) -> np.ndarray:
    """||du_t - K_t delta|| for delta = h * direction, re-solving the tail problem from x_t + delta.

    The tail problem keeps the stage and terminal costs and shortens the
    horizon to T - t; it is warm-started from the nominal tail. A quadratic
    decay of the error in h confirms that K_t is the derivative of the
    optimal control with respect to the state.
    """
    import dataclasses

    from sobdiff.systems import TaskParams
    from sobdiff.trajopt import SolveOptions, solve

    opts = opts or SolveOptions(n_max=500, cost_tol=1e-15, grad_tol=1e-20)
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    tail = dataclasses.replace(spec, T=spec.T - t)
    errs = []
    for h in hs:
        delta = h * direction
        sub = TaskParams(result.X[t] + delta, task.goal, task.obstacles)
        X0 = result.X[t:].copy()
        X0[0] = sub.x_init
        res = solve(tail, sub, X0, result.U[t:].copy(), opts)
        du = res.U[0] - result.U[t]
        errs.append(float(np.linalg.norm(du - result.gains[t] @ delta)))
    return np.asarray(errs)
