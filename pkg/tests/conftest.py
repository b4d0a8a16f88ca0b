import numpy as np
import pytest

from sobdiff import systems as S
from sobdiff import trajopt as TO


@pytest.fixture(scope="session")
def pendulum_solution():
    spec = S.make_system("pendulum")
    task = S.sample_task(spec, np.random.default_rng(0))
    X0, U0 = S.interpolate_init(spec, task)
    res = TO.solve(spec, task, X0, U0, TO.SolveOptions(cost_tol=1e-15, grad_tol=1e-20, n_max=2000))
    assert res.converged
    return spec, task, res


def random_lqr(rng, n_x=None, n_u=None, T=None):
    n_x = n_x or int(rng.integers(1, 5))
    n_u = n_u or int(rng.integers(1, n_x + 1))
    T = T or int(rng.integers(2, 51))
    A = np.eye(n_x) + 0.1 * rng.normal(size=(n_x, n_x))
    B = rng.normal(size=(n_x, n_u))
    M = rng.normal(size=(n_x, n_x))
    Q = M @ M.T / n_x
    R = np.eye(n_u) * rng.uniform(0.1, 2.0)
    N = rng.normal(size=(n_x, n_x))
    QT = N @ N.T
    return TO.LQRProblem(A, B, Q, R, QT, T)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(n: int, ok: bool, detail: str):
        line = f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
