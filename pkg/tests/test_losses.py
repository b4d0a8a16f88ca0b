import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sobdiff import ddpm
from sobdiff import systems as S
from sobdiff.buffer import Buffer, NormStats, TrajectoryRecord, build_chunk_table
from sobdiff.denoiser import MLP, Adam, Denoiser, DirectPolicy, Layout
from sobdiff.interplay import record_from_result
from sobdiff.losses import (Batch, Draws, TrainConfig, denoiser_step_grad, diff_loss, draw, jacobian_mismatch,
                            make_denoiser, policy_step_grad, sobolev_diff_loss, sobolev_mlp_loss, table_batch,
                            train)

SCHED = ddpm.make_schedule(5)
LAYOUT = Layout(T_h=4, T_o=1, n_a=2, n_x=3, n_u=2, n_xi=2)


def random_batch(rng, B=4, layout=LAYOUT, with_J=True):
    J = rng.normal(size=(B, layout.T_h * layout.n_a, layout.T_o * layout.n_x)) if with_J else None
    return Batch(rng.normal(size=(B, layout.T_h, layout.n_a)), rng.normal(size=(B, layout.T_o, layout.n_o)),
                 rng.normal(size=(B, layout.n_xi)), J)


class AffineStub:
    """tau_theta = tau0* + J*(x - x*) for a single stored chunk, whatever the noisy input."""

    def __init__(self, batch, layout=LAYOUT):
        self.b, self.layout = batch, layout

    def _dx(self, obs):
        return (obs - self.b.obs)[:, :, :self.layout.n_x].reshape(len(obs), -1)

    def forward(self, tau_k, k, xi, obs):
        y = self.b.tau0.reshape(len(obs), -1) + np.einsum("bjo,bo->bj", self.b.J, self._dx(obs))
        return y.reshape(self.b.tau0.shape)

    def forward_with_input_grad(self, tau_k, k, xi, obs, v):
        return self.forward(tau_k, k, xi, obs), np.einsum("bj,bjo->bo", v, self.b.J)


class ScaleStub:
    def __init__(self, c):
        self.c = c

    def forward(self, tau_k, k, xi, obs):
        return self.c * tau_k


def test_perfect_and_zero_denoisers():
    rng = np.random.default_rng(0)
    b = random_batch(rng)
    stub = AffineStub(b)
    assert diff_loss(stub, b, SCHED, rng) == 0.0
    assert sobolev_diff_loss(stub, b, SCHED, 1.0, 3, rng) == 0.0
    zero = ScaleStub(0.0)
    assert np.isclose(diff_loss(zero, b, SCHED, rng), np.mean(np.sum(b.tau0 ** 2, axis=(1, 2))))


def test_linear_toy_matches_closed_form_expectation():
    """E over (k, eps) of ||tau0 - c tau_k||^2 with history inpainting, against Monte Carlo."""
    rng = np.random.default_rng(1)
    c = 0.6
    tau0 = rng.normal(size=(LAYOUT.T_h, LAYOUT.n_a))
    ab = SCHED.alpha_bars[1:]
    free = tau0[1:]
    n_free = free.size
    per_k = (c * np.sqrt(ab) - 1) ** 2 * np.sum(free ** 2) + c ** 2 * (1 - ab) * n_free
    expected = np.mean(per_k) + (c - 1) ** 2 * np.sum(tau0[:1] ** 2)
    n = 10_000
    b = Batch(np.broadcast_to(tau0, (n,) + tau0.shape).copy(), np.zeros((n, 1, LAYOUT.n_o)), np.zeros((n, 2)))
    vals = []
    stub = ScaleStub(c)
    for _ in range(5):
        d = draw(rng, b, 5, 1)
        pred = stub.forward(ddpm.q_sample(SCHED, b.tau0, d.k, d.eps), None, None, None)
        # reproduce the inpainted per-sample values to get a standard error
        tk = ddpm.q_sample(SCHED, b.tau0, d.k, d.eps)
        tk[:, :1] = b.tau0[:, :1]
        vals.append(np.sum((b.tau0 - c * tk) ** 2, axis=(1, 2)))
        assert np.isclose(diff_loss(stub, b, SCHED, rng, draws=d), vals[-1].mean())
    vals = np.concatenate(vals)
    se = vals.std() / np.sqrt(vals.size)
    assert abs(vals.mean() - expected) < 3 * se


def test_alpha_zero_equals_diffusion_loss_on_shared_draws():
    rng = np.random.default_rng(2)
    den = Denoiser(LAYOUT, hidden=(8, 8), rng=rng)
    b = random_batch(rng)
    d = draw(rng, b, 5, 2)
    assert sobolev_diff_loss(den, b, SCHED, 0.0, 2, rng, draws=d) == diff_loss(den, b, SCHED, rng, draws=d)


def test_missing_jacobian_is_rejected():
    rng = np.random.default_rng(3)
    den = Denoiser(LAYOUT, hidden=(8,), rng=rng)
    with pytest.raises(ValueError):
        sobolev_diff_loss(den, random_batch(rng, with_J=False), SCHED, 1.0, 1, rng)


def test_orthonormal_projections_give_dense_frobenius_mismatch():
    rng = np.random.default_rng(4)
    den = Denoiser(LAYOUT, hidden=(8, 8), rng=rng)
    b = random_batch(rng, B=3)
    d_out = LAYOUT.d_out
    base = draw(rng, b, 5, 1)
    V = np.repeat(np.eye(d_out)[:, None, :], 3, axis=1)
    d = Draws(base.k, base.eps, V)
    sob = sobolev_diff_loss(den, b, SCHED, 1.0, d_out, rng, draws=d)
    dif = diff_loss(den, b, SCHED, rng, draws=d)
    tau_k = ddpm.q_sample(SCHED, b.tau0, d.k, d.eps)
    tau_k[:, :1] = b.tau0[:, :1]
    frob = np.mean([np.sum((b.J[i] - den.dense_jacobian(tau_k[i], d.k[i], b.xi[i], b.obs[i])) ** 2)
                    for i in range(3)])
    assert np.isclose((sob - dif) * d_out, frob, rtol=1e-10)


def test_projection_expectation_is_scaled_frobenius():
    rng = np.random.default_rng(5)
    den = Denoiser(LAYOUT, hidden=(8, 8), rng=rng)
    b = random_batch(rng, B=1)
    k = np.array([3])
    eps = rng.normal(size=b.tau0.shape)
    tau_k = ddpm.q_sample(SCHED, b.tau0, k, eps)
    tau_k[:, :1] = b.tau0[:, :1]
    M = b.J[0] - den.dense_jacobian(tau_k[0], 3, b.xi[0], b.obs[0])
    n = 20_000
    v = rng.normal(size=(n, LAYOUT.d_out))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    vals = np.sum((v @ M) ** 2, axis=1)
    target = np.sum(M ** 2) / LAYOUT.d_out
    assert abs(vals.mean() - target) < 3 * vals.std() / np.sqrt(n)
    # the same quantity through the loss, one projection at a time
    d = Draws(k, eps, v[:5, None, :])
    sob = sobolev_diff_loss(den, b, SCHED, 1.0, 5, rng, draws=d) - diff_loss(den, b, SCHED, rng, draws=d)
    assert np.isclose(sob, vals[:5].mean(), rtol=1e-10)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_sign_of_projection_is_irrelevant(seed):
    rng = np.random.default_rng(seed)
    den = Denoiser(LAYOUT, hidden=(6,), rng=np.random.default_rng(6))
    b = random_batch(rng, B=2)
    d = draw(rng, b, 5, 2)
    flipped = Draws(d.k, d.eps, d.v * np.array([1.0, -1.0])[:, None, None])
    a = sobolev_diff_loss(den, b, SCHED, 1.0, 2, rng, draws=d)
    c = sobolev_diff_loss(den, b, SCHED, 1.0, 2, rng, draws=flipped)
    assert np.isclose(a, c, rtol=1e-12)


def test_step_gradient_matches_loss_and_finite_differences():
    layout = Layout(T_h=3, T_o=1, n_a=1, n_x=2, n_u=1, n_xi=1)
    den = Denoiser(layout, hidden=(4,), rng=np.random.default_rng(7))
    b = random_batch(np.random.default_rng(8), B=2, layout=layout)
    cfg = TrainConfig(T_h=3, T_a=2, n_proj=2, alpha_sob=0.7)
    loss, g, _ = denoiser_step_grad(den, b, SCHED, cfg, np.random.default_rng(9))
    ref = sobolev_diff_loss(den, b, SCHED, 0.7, 2, np.random.default_rng(9))
    assert np.isclose(loss, ref, rtol=1e-12)
    th = den.net.get_flat()
    gf = np.zeros_like(th)
    h = 1e-6
    for i in range(th.size):
        vals = []
        for s in (h, -h):
            t = th.copy()
            t[i] += s
            den.net.set_flat(t)
            vals.append(sobolev_diff_loss(den, b, SCHED, 0.7, 2, np.random.default_rng(9)))
        gf[i] = (vals[0] - vals[1]) / (2 * h)
    den.net.set_flat(th)
    assert np.linalg.norm(g - gf) / np.linalg.norm(gf) < 1e-4


def test_mlp_loss_and_gradient():
    rng = np.random.default_rng(10)
    pol = DirectPolicy(3, 2, 2, hidden=(5, 4), rng=rng)
    x, xi = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    a, K = rng.normal(size=(6, 2)), rng.normal(size=(6, 2, 3))
    # alpha = 0 with a perfect regressor
    assert sobolev_mlp_loss(pol, x, xi, pol.forward(x, xi), K, 0.0, 1, rng) == 0.0
    loss, g, _ = policy_step_grad(pol, x, xi, a, K, 0.5, 2, np.random.default_rng(11))
    assert np.isclose(loss, sobolev_mlp_loss(pol, x, xi, a, K, 0.5, 2, np.random.default_rng(11)), rtol=1e-12)
    th = pol.net.get_flat()
    gf = np.zeros_like(th)
    h = 1e-6
    for i in range(th.size):
        vals = []
        for s in (h, -h):
            t = th.copy()
            t[i] += s
            pol.net.set_flat(t)
            vals.append(sobolev_mlp_loss(pol, x, xi, a, K, 0.5, 2, np.random.default_rng(11)))
        gf[i] = (vals[0] - vals[1]) / (2 * h)
    pol.net.set_flat(th)
    assert np.linalg.norm(g - gf) / np.linalg.norm(gf) < 1e-4


def test_linear_policy_recovers_lqr_gain():
    """Identity-activation net on u = -K x data from a stationary Riccati gain."""
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.0], [0.1]])
    P = np.eye(2)
    for _ in range(500):
        K = np.linalg.solve(0.1 + B.T @ P @ B, B.T @ P @ A)
        P = np.eye(2) + A.T @ P @ (A - B @ K)
    rng = np.random.default_rng(12)
    X = rng.normal(size=(64, 2))
    U = -X @ K.T
    Kt = np.broadcast_to(-K, (64, 1, 2))
    net = MLP(2, [4], 1, rng, activation="identity")
    opt = Adam(net.n_params, lr=1e-2)
    th = net.get_flat()
    v = np.ones((1, 64, 1))
    for _ in range(3000):
        _, g, _ = net.loss_and_grad(X, U, np.arange(2), v, np.einsum("pbj,bjo->pbo", v, Kt), 1.0)
        th = opt.step(th, g)
        net.set_flat(th)
    grad = net.input_grad(X[:1], np.ones((1, 1)))[1]
    np.testing.assert_allclose(grad[0], -K[0], atol=1e-4)


@pytest.fixture(scope="module")
def small_buffer(pendulum_solution):
    spec, task, res = pendulum_solution
    buf = Buffer(spec)
    buf.insert(record_from_result(spec, task, res, "cold"))
    return buf


def test_config_validation_and_roundtrip():
    for bad in (dict(alpha_sob=-1), dict(n_proj=0), dict(T_h=8, T_o=1, T_a=8), dict(T_h=8, T_o=8, T_a=1),
                dict(alpha_by_k=(1.0, 2.0))):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(T_h=16, T_a=4, alpha_by_k=(1, 1, 0.5, 0.5, 0), hidden=(8, 8))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_epochs_leave_parameters(small_buffer):
    cfg = TrainConfig(T_h=8, T_a=7, n_pl=0, hidden=(8,))
    den = make_denoiser(small_buffer, cfg, np.random.default_rng(13))
    th = den.net.get_flat().copy()
    den, losses = train(den, small_buffer, cfg, np.random.default_rng(14))
    assert losses.size == 0 and np.array_equal(den.net.get_flat(), th)


def test_training_is_deterministic(small_buffer):
    cfg = TrainConfig(T_h=8, T_a=7, n_pl=3, hidden=(8,))
    runs = []
    for _ in range(2):
        den = make_denoiser(small_buffer, cfg, np.random.default_rng(15))
        den, losses = train(den, small_buffer, cfg, np.random.default_rng(16))
        runs.append((den.net.get_flat(), losses))
    assert np.array_equal(runs[0][0], runs[1][0]) and np.array_equal(runs[0][1], runs[1][1])


def test_single_chunk_memorisation(pendulum_solution):
    spec0, task, res = pendulum_solution
    T_h = 8
    spec = S.make_system("pendulum", T=T_h)
    rec = record_from_result(spec0, task, res, "cold")
    buf = Buffer(spec)
    buf.insert(TrajectoryRecord(task, rec.X[:T_h + 1], rec.U[:T_h], rec.K[:T_h], rec.A[:T_h], rec.B[:T_h],
                                rec.cost, rec.iters, "cold"))
    cfg = TrainConfig(T_h=T_h, T_a=T_h - 1, n_pl=1000, hidden=(32, 32), alpha_sob=0.0)
    den = make_denoiser(buf, cfg, np.random.default_rng(17))
    _, losses = train(den, buf, cfg, np.random.default_rng(18))
    # 100-epoch block means fall steadily until the float floor is near
    blocks = losses.reshape(10, 100).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)
    assert blocks[-1] < 1e-3


def test_sobolev_training_lowers_jacobian_mismatch(small_buffer):
    out = {}
    for alpha in (0.0, 1.0):
        cfg = TrainConfig(T_h=8, T_a=7, n_pl=40, hidden=(32, 32), alpha_sob=alpha)
        den = make_denoiser(small_buffer, cfg, np.random.default_rng(19))
        den, losses = train(den, small_buffer, cfg, np.random.default_rng(20))
        tab = build_chunk_table(small_buffer, NormStats.from_dict(den.norm), 8, 1)
        b = table_batch(tab, np.arange(0, len(tab.tau0), 7))
        out[alpha] = (losses, jacobian_mismatch(den, b, SCHED, np.random.default_rng(21)))
    for losses, _ in out.values():
        assert losses[-5:].mean() < losses[:5].mean()
    assert out[1.0][1] < out[0.0][1]
