"""Squared-cosine DDPM schedule, forward noising, posterior steps and inpainted sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sobdiff.systems import NumericFailure

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


def _alpha_bar_fn(s: float) -> float:
    return math.cos((s + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by k = 0..K; index 0 holds the clean-data convention."""

    K: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    post_var: np.ndarray
    coef_x0: np.ndarray
    coef_xt: np.ndarray

    def __post_init__(self):
        b = self.betas[1:]
        if not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must lie in (0, 1)")
        if not np.all(np.diff(self.alpha_bars) < 0):
            raise ValueError("alpha_bar must decrease strictly")


def make_schedule(K: int = 5) -> NoiseSchedule:
    if K < 1:
        raise ValueError("need K >= 1")
    betas = np.zeros(K + 1)
    for i in range(K):
        betas[i + 1] = min(1 - _alpha_bar_fn((i + 1) / K) / _alpha_bar_fn(i / K), MAX_BETA)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars[0] = 1.0
    post_var = np.zeros(K + 1)
    coef_x0 = np.zeros(K + 1)
    coef_xt = np.zeros(K + 1)
    for k in range(1, K + 1):
        denom = 1 - alpha_bars[k]
        post_var[k] = (1 - alpha_bars[k - 1]) / denom * betas[k]
        coef_x0[k] = math.sqrt(alpha_bars[k - 1]) * betas[k] / denom
        coef_xt[k] = math.sqrt(alphas[k]) * (1 - alpha_bars[k - 1]) / denom
    return NoiseSchedule(K, betas, alphas, alpha_bars, post_var, coef_x0, coef_xt)


def q_sample(sched: NoiseSchedule, tau0, k, eps):
    """tau_k = sqrt(abar_k) tau0 + sqrt(1 - abar_k) eps; ``k`` may be a per-sample array."""
    tau0 = np.asarray(tau0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps.shape != tau0.shape:
        raise ValueError("eps must match tau0")
    ab = sched.alpha_bars[np.asarray(k)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (tau0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * tau0 + np.sqrt(1 - ab) * eps


def posterior_mean(sched: NoiseSchedule, tau_k, tau0_hat, k: int):
    return sched.coef_x0[k] * tau0_hat + sched.coef_xt[k] * tau_k


def posterior_step(sched: NoiseSchedule, tau_k, tau0_hat, k: int, rng: np.random.Generator):
    if not 1 <= k <= sched.K:
        raise ValueError(f"k={k} outside [1, {sched.K}]")
    mu = posterior_mean(sched, tau_k, tau0_hat, k)
    if sched.post_var[k] == 0.0:
        return mu
    return mu + math.sqrt(sched.post_var[k]) * rng.standard_normal(np.shape(mu))


def generate(denoiser, sched: NoiseSchedule, xi, o_hist, a_hist, K_rollout: int,
             rng: np.random.Generator, clip: bool = False) -> np.ndarray:
    """Ancestral sampling in normalised space with the history rows held at ``a_hist``.

    ``denoiser(tau_k, k, xi, o_hist)`` predicts tau0 for a single (T_h, n_a)
    chunk; inputs and outputs are normalised. Returns the normalised tau0.
    """
    if not 1 <= K_rollout <= sched.K:
        raise ValueError(f"K_rollout={K_rollout} outside [1, {sched.K}]")
    a_hist = np.asarray(a_hist, dtype=float)
    n_o = a_hist.shape[0]
    tau = rng.standard_normal((denoiser.T_h, denoiser.n_a))
    for k in range(K_rollout, 0, -1):
        tau[:n_o] = a_hist
        tau0_hat = denoiser(tau, k, xi, o_hist)
        if not np.all(np.isfinite(tau0_hat)):
            raise NumericFailure(f"non-finite denoiser output at k={k}")
        if clip:
            tau0_hat = np.clip(tau0_hat, -1.0, 1.0)
        tau = posterior_step(sched, tau, tau0_hat, k, rng)
    tau[:n_o] = a_hist
    return tau
