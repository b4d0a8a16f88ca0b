import numpy as np
import pytest

from sobdiff import systems as S
from sobdiff import trajopt as TO
from sobdiff.sensitivity import tail_resolve_errors

from conftest import random_lqr


def lqr_rollout(prob, K, x0):
    X = [x0]
    U = []
    for t in range(prob.T):
        U.append(K[t] @ X[-1])
        X.append(prob.A @ X[-1] + prob.B @ U[-1])
    X, U = np.array(X), np.array(U)
    J = sum(x @ prob.Q @ x + u @ prob.R @ u for x, u in zip(X[:-1], U)) + X[-1] @ prob.Q_T @ X[-1]
    return X, U, J


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_lqr_matches_riccati():
    rng = np.random.default_rng(0)
    for _ in range(10):
        prob = random_lqr(rng)
        x0 = rng.normal(size=prob.n_x)
        K, P = TO.riccati_reference(prob)
        Xr, Ur, Jr = lqr_rollout(prob, K, x0)
        res = TO.solve_lqr(prob, x0)
        assert res.converged and res.iters <= 2
        assert rel(res.gains, K) < 1e-8
        assert rel(res.X, Xr) < 1e-8 and rel(res.U, Ur) < 1e-8
        assert abs(res.cost - Jr) / Jr < 1e-8
        assert abs(Jr - x0 @ P[0] @ x0) / Jr < 1e-8


def test_scalar_riccati_golden_ratio():
    prob = TO.LQRProblem(np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.eye(1), 200)
    _, P = TO.riccati_reference(prob)
    assert abs(P[0, 0, 0] - (1 + np.sqrt(5)) / 2) < 1e-12


def test_lqr_problem_validation():
    with pytest.raises(ValueError):
        TO.LQRProblem(np.eye(2), np.ones((2, 1)), np.eye(2), -np.eye(1), np.eye(2), 5)
    with pytest.raises(ValueError):
        TO.LQRProblem(np.eye(2), np.ones((2, 1)), np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(1), np.eye(2), 5)


def test_options_validation():
    with pytest.raises(ValueError):
        TO.SolveOptions(n_max=0)
    with pytest.raises(ValueError):
        TO.SolveOptions(cost_tol=0.0)
    with pytest.raises(ValueError):
        TO.SolveOptions(ls_backtrack=1.0)


def test_pendulum_swing_up_reaches_goal():
    spec = S.make_system("pendulum")
    rng = np.random.default_rng(1)
    hits = 0
    n = 10
    for _ in range(n):
        task = S.sample_task(spec, rng)
        res = TO.solve(spec, task, *S.interpolate_init(spec, task))
        err = np.linalg.norm(S.end_effector(spec, res.X[-1]) - task.goal)
        hits += res.converged and err < 0.05
    assert hits >= 0.8 * n


def test_solution_is_dynamics_feasible(pendulum_solution):
    spec, task, res = pendulum_solution
    assert np.array_equal(res.X[0], task.x_init)
    np.testing.assert_array_equal(S.simulate(spec, task.x_init, res.U), res.X)
    hist = res.cost_history
    assert np.all(np.diff(hist) <= 1e-9 * np.abs(hist[:-1]))
    assert res.iters <= 2000


def test_warm_start_from_solution_is_fixed_point(pendulum_solution):
    spec, task, res = pendulum_solution
    again = TO.solve(spec, task, res.X, res.U)
    assert again.converged and again.iters <= 2
    assert abs(again.cost - res.cost) <= 1e-9 * res.cost


def test_nonfinite_reported_not_raised():
    spec = S.make_system("pendulum")
    task = S.sample_task(spec, np.random.default_rng(0))
    X0, U0 = S.interpolate_init(spec, task)
    X0 = X0.copy()
    X0[5, 0] = np.nan
    res = TO.solve(spec, task, X0, U0, TO.SolveOptions(n_max=5))
    assert np.all(np.isfinite(res.X)) or not res.converged


def test_feedback_gains_are_second_order(pendulum_solution):
    spec, task, res = pendulum_solution
    for d in (np.array([1.0, 0.0]), np.array([0.0, 1.0])):
        e = tail_resolve_errors(spec, task, res, 10, d, [1e-2, 5e-3, 2.5e-3])
        ratios = e[:-1] / e[1:]
        assert np.all((ratios > 2) & (ratios < 8)), ratios
