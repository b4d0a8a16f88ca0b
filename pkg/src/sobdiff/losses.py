"""Training objectives (diffusion, Sobolev+diffusion, direct Sobolev regression) and the epoch loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from sobdiff import ddpm
from sobdiff.buffer import Buffer, ChunkTable, NormStats, build_chunk_table, row_shifts
from sobdiff.denoiser import Adam, Denoiser, DirectPolicy, Layout
from sobdiff.systems import NumericFailure


@dataclass(frozen=True)
class TrainConfig:
    alpha_sob: float = 1.0
    n_proj: int = 1
    n_pl: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    K_train: int = 5
    T_h: int = 32
    T_o: int = 1
    T_a: int = 31
    hidden: tuple = (64, 64, 64)
    # optional per-step weights alpha_k (k = 1..K_train), replaces alpha_sob when set
    alpha_by_k: tuple | None = None
    # weight of the whole-chain derivative metric; only ever logged
    full_process_weight: float = 0.0

    def __post_init__(self):
        if self.alpha_sob < 0:
            raise ValueError("alpha_sob must be >= 0")
        if self.n_proj < 1:
            raise ValueError("n_proj must be >= 1")
        if self.n_pl < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need n_pl >= 0, batch_size >= 1, lr > 0")
        if not 1 <= self.T_o < self.T_h:
            raise ValueError("need 1 <= T_o < T_h")
        if not 1 <= self.T_a <= self.T_h - self.T_o:
            raise ValueError(f"T_a={self.T_a} must lie in [1, T_h - T_o = {self.T_h - self.T_o}]")
        if self.alpha_by_k is not None and len(self.alpha_by_k) != self.K_train:
            raise ValueError("alpha_by_k needs one weight per diffusion step")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["alpha_by_k"] = None if self.alpha_by_k is None else list(self.alpha_by_k)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (64, 64, 64)))
        if d.get("alpha_by_k") is not None:
            d["alpha_by_k"] = tuple(d["alpha_by_k"])
        return cls(**d)


@dataclass
class Batch:
    """Normalised chunks: tau0 (B, T_h, n_a), obs (B, T_o, n_o), xi (B, n_xi), J (B, T_h n_a, T_o n_x)."""

    tau0: np.ndarray
    obs: np.ndarray
    xi: np.ndarray
    J: np.ndarray | None = None

    def __len__(self):
        return self.tau0.shape[0]


@dataclass
class Draws:
    k: np.ndarray
    eps: np.ndarray
    v: np.ndarray


def unit_sphere(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def draw(rng: np.random.Generator, batch: Batch, K_train: int, n_proj: int) -> Draws:
    """One (k, eps, v) draw per chunk; the order is fixed so any alpha shares them."""
    B = len(batch)
    k = rng.integers(1, K_train + 1, size=B)
    eps = rng.standard_normal(batch.tau0.shape)
    v = unit_sphere(rng, (n_proj, B, batch.tau0[0].size))
    return Draws(k, eps, v)


def noised_input(sched: ddpm.NoiseSchedule, batch: Batch, d: Draws, T_o: int) -> np.ndarray:
    tau_k = ddpm.q_sample(sched, batch.tau0, d.k, d.eps)
    tau_k[:, :T_o] = batch.tau0[:, :T_o]
    return tau_k


def _sob_weights(cfg_alpha: float, alpha_by_k, k) -> np.ndarray:
    if alpha_by_k is None:
        return np.full(len(k), cfg_alpha)
    return np.asarray(alpha_by_k, dtype=float)[np.asarray(k) - 1]


def diff_loss(denoiser, batch: Batch, sched, rng, T_o: int = 1, K_train: int | None = None,
              draws: Draws | None = None) -> float:
    """Batch mean of ||tau0 - tau_theta(tau_k, k, xi, o_hist)||^2."""
    d = draws or draw(rng, batch, K_train or sched.K, 1)
    pred = denoiser.forward(noised_input(sched, batch, d, T_o), d.k, batch.xi, batch.obs)
    return float(np.mean(np.sum((pred - batch.tau0) ** 2, axis=(1, 2))))


def sobolev_diff_loss(denoiser, batch: Batch, sched, alpha_sob: float, n_proj: int, rng,
                      T_o: int = 1, K_train: int | None = None, draws: Draws | None = None) -> float:
    """Diffusion term plus (alpha/n_proj) sum_i ||v_i'J - d(v_i' tau_theta)/dx_hist||^2, batch mean."""
    if batch.J is None:
        raise ValueError("sobolev loss needs J_target on every chunk")
    d = draws or draw(rng, batch, K_train or sched.K, n_proj)
    tau_k = noised_input(sched, batch, d, T_o)
    B = len(batch)
    pred = denoiser.forward(tau_k, d.k, batch.xi, batch.obs)
    total = np.sum((pred - batch.tau0) ** 2, axis=(1, 2))
    for i in range(n_proj):
        _, g = denoiser.forward_with_input_grad(tau_k, d.k, batch.xi, batch.obs, d.v[i])
        c = np.einsum("bj,bjo->bo", d.v[i], batch.J)
        total = total + alpha_sob / n_proj * np.sum((c - g) ** 2, axis=1)
    return float(total.sum() / B)


def sobolev_mlp_loss(policy: DirectPolicy, x, xi, a_target, K_target, alpha_sob: float,
                     n_proj: int, rng) -> float:
    """||pi(x, xi) - a||^2 + (alpha/n_proj) sum_i ||v_i'K - d(v_i' pi)/dx||^2, batch mean."""
    x = np.atleast_2d(x)
    B = x.shape[0]
    Z = np.hstack([x, np.atleast_2d(xi)])
    v = unit_sphere(rng, (n_proj, B, policy.n_a))
    y = policy.net.forward(Z)
    total = np.sum((y - a_target) ** 2, axis=1)
    for i in range(n_proj):
        _, zb = policy.net.input_grad(Z, v[i])
        c = np.einsum("bj,bjo->bo", v[i], K_target)
        total = total + alpha_sob / n_proj * np.sum((c - zb[:, :policy.n_x]) ** 2, axis=1)
    return float(total.sum() / B)


# ----------------------------------------------------------------------
def denoiser_step_grad(den: Denoiser, batch: Batch, sched, cfg: TrainConfig, rng):
    d = draw(rng, batch, cfg.K_train, cfg.n_proj)
    tau_k = noised_input(sched, batch, d, cfg.T_o)
    Z = den.build_input(tau_k, d.k, batch.xi, batch.obs)
    B = len(batch)
    Y = batch.tau0.reshape(B, -1)
    w = _sob_weights(cfg.alpha_sob, cfg.alpha_by_k, d.k)
    if np.any(w > 0):
        s = np.sqrt(w)[None, :, None]
        V = d.v * s
        C = np.einsum("pbj,bjo->pbo", V, batch.J)
        return den.net.loss_and_grad(Z, Y, den.layout.x_hist_index, V, C, 1.0)
    return den.net.loss_and_grad(Z, Y, den.layout.x_hist_index)


def policy_step_grad(pol: DirectPolicy, x, xi, a, K, alpha_sob: float, n_proj: int, rng):
    B = x.shape[0]
    Z = np.hstack([x, xi])
    v = unit_sphere(rng, (n_proj, B, pol.n_a))
    if alpha_sob > 0:
        C = np.einsum("pbj,bjo->pbo", v, K)
        return pol.net.loss_and_grad(Z, a, pol.x_index, v, C, alpha_sob)
    return pol.net.loss_and_grad(Z, a, pol.x_index)


class TrainingAborted(NumericFailure):
    def __init__(self, msg, model, losses):
        super().__init__(msg)
        self.model = model
        self.losses = losses


def _epoch_batches(E: int, bs: int) -> list[int]:
    n = math.ceil(E / bs)
    return [min(bs, E - i * bs) for i in range(n)]


def table_batch(table: ChunkTable, idx) -> Batch:
    return Batch(table.tau0[idx], table.obs[idx], table.xi[idx], table.J[idx])


def make_denoiser(buf: Buffer, cfg: TrainConfig, rng, norm: NormStats | None = None) -> Denoiser:
    spec = buf.spec
    norm = norm or buf.fit_norm()
    n_xi = buf.records[0].xi.features().size
    layout = Layout(cfg.T_h, cfg.T_o, spec.n_a, spec.n_x, spec.n_u, n_xi)
    return Denoiser(layout, cfg.hidden, rng, K=cfg.K_train, norm=norm.to_dict())


def train_denoiser(den: Denoiser, buf: Buffer, cfg: TrainConfig, rng: np.random.Generator,
                   table: ChunkTable | None = None):
    """n_pl epochs of Adam on the (Sobolev+)diffusion loss. Returns (den, per-epoch mean loss)."""
    if len(buf) == 0:
        raise ValueError("cannot train on an empty buffer")
    sched = ddpm.make_schedule(cfg.K_train)
    norm = NormStats.from_dict(den.norm)
    table = table if table is not None else build_chunk_table(buf, norm, cfg.T_h, cfg.T_o)
    # a buffer of T = T_h records still holds one chunk each
    E = max(1, buf.epoch_size(cfg.T_h))
    opt = Adam(den.net.n_params, cfg.lr)
    theta = den.net.get_flat()
    losses = []
    for _ in range(cfg.n_pl):
        tot = 0.0
        for bs in _epoch_batches(E, cfg.batch_size):
            batch = table_batch(table, table.sample_indices(rng, bs))
            try:
                loss, grad, _ = denoiser_step_grad(den, batch, sched, cfg, rng)
            except NumericFailure as err:
                den.net.set_flat(theta)
                raise TrainingAborted(str(err), den, losses) from err
            theta = opt.step(theta, grad)
            den.net.set_flat(theta)
            tot += loss * bs
        losses.append(tot / E)
    return den, np.asarray(losses)


@dataclass
class PairTable:
    """Normalised (x_t, xi, a_t, da_t/dx_t) pairs for direct policies."""

    x: np.ndarray
    xi: np.ndarray
    a: np.ndarray
    K: np.ndarray


def direct_targets(rec, action_mode: str):
    """Per-step targets: the control and its gain, or for state actions the next state and Phi."""
    if action_mode == "u":
        return rec.X[:-1], rec.U, rec.K
    Phi = rec.A + rec.B @ rec.K
    return rec.X[:-1], rec.X[1:], Phi


def direct_norm_pair(norm: NormStats, action_mode: str):
    """Affine maps for the direct policy's output a (control or state)."""
    if action_mode == "u":
        return norm.action.offset, norm.action.scale
    return norm.obs.offset[:norm.n_x], norm.obs.scale[:norm.n_x]


def build_pair_table(buf: Buffer, norm: NormStats) -> PairTable:
    xs, xis, as_, Ks = [], [], [], []
    sx = norm.obs.scale[:norm.n_x]
    ox = norm.obs.offset[:norm.n_x]
    oa, sa = direct_norm_pair(norm, buf.spec.action_mode)
    for r in buf.records:
        x, a, K = direct_targets(r, buf.spec.action_mode)
        sh = row_shifts(buf.spec, x)
        x = x + sh
        if buf.spec.action_mode == "x":
            a = a + sh
        xs.append((x - ox) / sx)
        as_.append((a - oa) / sa)
        Ks.append(K * sx[None, None, :] / sa[None, :, None])
        xis.append(np.repeat(norm.norm_xi(r.xi.features())[None], len(x), axis=0))
    return PairTable(np.vstack(xs), np.vstack(xis), np.vstack(as_), np.concatenate(Ks))


def make_direct_policy(buf: Buffer, cfg: TrainConfig, rng, norm: NormStats | None = None) -> DirectPolicy:
    spec = buf.spec
    norm = norm or buf.fit_norm()
    n_xi = buf.records[0].xi.features().size
    n_out = spec.n_u if spec.action_mode == "u" else spec.n_x
    return DirectPolicy(spec.n_x, n_xi, n_out, cfg.hidden, rng, norm=norm.to_dict())


def train_direct(pol: DirectPolicy, buf: Buffer, cfg: TrainConfig, rng: np.random.Generator):
    """n_pl epochs of |D| T pairs each; alpha_sob = 0 gives the plain regression baseline."""
    if len(buf) == 0:
        raise ValueError("cannot train on an empty buffer")
    norm = NormStats.from_dict(pol.norm)
    tab = build_pair_table(buf, norm)
    N = tab.x.shape[0]
    E = buf.epoch_size_direct()
    opt = Adam(pol.net.n_params, cfg.lr)
    theta = pol.net.get_flat()
    losses = []
    for _ in range(cfg.n_pl):
        tot = 0.0
        for bs in _epoch_batches(E, cfg.batch_size):
            idx = rng.integers(N, size=bs)
            try:
                loss, grad, _ = policy_step_grad(pol, tab.x[idx], tab.xi[idx], tab.a[idx], tab.K[idx],
                                                 cfg.alpha_sob, cfg.n_proj, rng)
            except NumericFailure as err:
                pol.net.set_flat(theta)
                raise TrainingAborted(str(err), pol, losses) from err
            theta = opt.step(theta, grad)
            pol.net.set_flat(theta)
            tot += loss * bs
        losses.append(tot / E)
    return pol, np.asarray(losses)


def train(model, buf: Buffer, cfg: TrainConfig, rng: np.random.Generator):
    if isinstance(model, Denoiser):
        return train_denoiser(model, buf, cfg, rng)
    return train_direct(model, buf, cfg, rng)


# ----------------------------------------------------------------------
def jacobian_mismatch(den: Denoiser, batch: Batch, sched, rng, T_o: int = 1) -> float:
    """Mean dense ||J_target - d tau_theta/dx_hist||_F^2 at freshly noised inputs."""
    d = draw(rng, batch, sched.K, 1)
    tau_k = noised_input(sched, batch, d, T_o)
    tot = 0.0
    for b in range(len(batch)):
        Jt = den.dense_jacobian(tau_k[b], d.k[b], batch.xi[b], batch.obs[b])
        tot += float(np.sum((batch.J[b] - Jt) ** 2))
    return tot / len(batch)


def full_process_mismatch(den: Denoiser, batch: Batch, sched, seed: int, K_rollout: int | None = None,
                          h: float = 1e-5) -> float:
    """Whole-chain derivative mismatch of the generated chunk w.r.t. x_hist.

    The sampler's noise is frozen by reseeding, and the derivative of the
    full reverse process is taken by central differences on the state rows of
    o_hist. This is a diagnostic only and never feeds a training update.
    """
    K_rollout = K_rollout or sched.K
    n_x = den.layout.n_x
    tot = 0.0
    for b in range(len(batch)):
        obs = batch.obs[b]
        a_hist = batch.tau0[b, :den.layout.T_o]
        cols = []
        for o in range(obs.shape[0]):
            for j in range(n_x):
                outs = []
                for s in (1.0, -1.0):
                    ob = obs.copy()
                    ob[o, j] += s * h
                    outs.append(ddpm.generate(den, sched, batch.xi[b], ob, a_hist, K_rollout,
                                              np.random.default_rng(seed)))
                cols.append(((outs[0] - outs[1]) / (2 * h)).ravel())
        J_full = np.array(cols).T
        tot += float(np.sum((batch.J[b] - J_full) ** 2))
    return tot / len(batch)
