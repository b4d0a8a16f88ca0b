"""Conditional MLP denoiser and direct policy with exact input gradients.

The Sobolev term needs d/dtheta of an input gradient. For a single
projection v with residual r = g - c, where g = d(v'y)/dx restricted to the
state-history inputs, the identity

    d||g - c||^2 / dtheta = 2 d/dtheta [ v' ydot(rho) ],   rho = scatter(r), held fixed,

turns the second-order pathway into one tangent (forward-mode) pass followed
by a reverse sweep over the joint primal/tangent graph.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sobdiff.systems import NumericFailure

EMB_DIM = 16


def _tanh(a):
    h = np.tanh(a)
    d1 = 1.0 - h * h
    return h, d1, -2.0 * h * d1


def _identity(a):
    return a, np.ones_like(a), np.zeros_like(a)


_ACTIVATIONS = {"tanh": _tanh, "identity": _identity}


def _act(name):
    """Activation returning (s(a), s'(a), s''(a))."""
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


class MLP:
    """Fully connected net y = W_{L+1} s(... s(W_1 z + b_1) ...) + b_{L+1} on row batches."""

    def __init__(self, d_in: int, hidden, d_out: int, rng: np.random.Generator | None = None,
                 activation: str = "tanh"):
        hidden = list(hidden)
        if len(hidden) == 0:
            raise ValueError("at least one hidden layer is required")
        if min([d_in, d_out] + hidden) < 1:
            raise ValueError("layer widths must be positive")
        self.dims = [d_in] + hidden + [d_out]
        self.activation = activation
        self._f = _act(activation)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W, self.b = [], []
        for fi, fo in zip(self.dims[:-1], self.dims[1:]):
            lim = 1.0 / math.sqrt(fi)
            self.W.append(rng.uniform(-lim, lim, size=(fo, fi)))
            self.b.append(rng.uniform(-lim, lim, size=fo))

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.W, self.b))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.W, self.b)])

    def set_flat(self, theta) -> None:
        i = 0
        for W, b in zip(self.W, self.b):
            W[...] = theta[i:i + W.size].reshape(W.shape)
            i += W.size
            b[...] = theta[i:i + b.size]
            i += b.size

    def flat_grads(self, gW, gb) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(gW, gb)])

    # ------------------------------------------------------------------
    def _forward(self, Z):
        hs, d1s, d2s = [Z], [], []
        h = Z
        for W, b in zip(self.W[:-1], self.b[:-1]):
            h, d1, d2 = self._f(h @ W.T + b)
            hs.append(h)
            d1s.append(d1)
            d2s.append(d2)
        y = h @ self.W[-1].T + self.b[-1]
        return y, hs, d1s, d2s

    def forward(self, Z) -> np.ndarray:
        return self._forward(np.asarray(Z, dtype=float))[0]

    def _vjp_input(self, V, d1s):
        hb = V @ self.W[-1]
        for l in range(len(d1s) - 1, -1, -1):
            hb = (hb * d1s[l]) @ self.W[l]
        return hb

    def input_grad(self, Z, V):
        """(y, d(sum_j V_j y_j)/dZ) per row."""
        y, _, d1s, _ = self._forward(np.asarray(Z, dtype=float))
        return y, self._vjp_input(np.asarray(V, dtype=float), d1s)

    def loss_and_grad(self, Z, Y, idx, V=None, C=None, alpha: float = 0.0):
        """Batch-mean loss and exact parameter gradient.

        loss = mean_b ||y_b - Y_b||^2 + alpha/n_proj * mean_b sum_i ||C_ib - g_ib||^2
        with g_ib = d(V_ib' y_b)/dZ_b[idx]. ``V`` is (n_proj, B, d_out) and
        ``C`` is (n_proj, B, len(idx)). Returns (loss, flat_grad, (diff, sob)).
        """
        Z = np.asarray(Z, dtype=float)
        B = Z.shape[0]
        y, hs, d1s, d2s = self._forward(Z)
        err = y - Y
        diff = float(np.sum(err * err)) / B
        nL = len(self.W)
        gW = [np.zeros_like(W) for W in self.W]
        gb = [np.zeros_like(b) for b in self.b]

        # primal pathway
        yb = (2.0 / B) * err
        gW[-1] += yb.T @ hs[-1]
        gb[-1] += yb.sum(0)
        hbar = [None] * nL
        hbar[nL - 1] = yb @ self.W[-1]
        abar = [None] * (nL - 1)

        sob = 0.0
        tangents = []
        if alpha > 0.0 and V is not None:
            n_proj = V.shape[0]
            w = 2.0 * alpha / (n_proj * B)
            for i in range(n_proj):
                g = self._vjp_input(V[i], d1s)[:, idx]
                r = g - C[i]
                sob += float(np.sum(r * r))
                rho = np.zeros_like(Z)
                rho[:, idx] = r
                # tangent forward pass along rho
                ad = [None] * (nL - 1)
                hd = [rho]
                for l in range(nL - 1):
                    ad[l] = hd[-1] @ self.W[l].T
                    hd.append(d1s[l] * ad[l])
                tangents.append((w * V[i], ad, hd))
            sob *= alpha / (n_proj * B)

        # backward over layers; tangent adjoints only exist where a tangent pass ran
        tb = [None] * len(tangents)
        for j, (ybd, ad, hd) in enumerate(tangents):
            gW[-1] += ybd.T @ hd[-1]
            tb[j] = ybd @ self.W[-1]
        for l in range(nL - 2, -1, -1):
            a_bar = hbar[l + 1] * d1s[l]
            for j, (ybd, ad, hd) in enumerate(tangents):
                a_bar += tb[j] * d2s[l] * ad[l]
                ad_bar = tb[j] * d1s[l]
                gW[l] += ad_bar.T @ hd[l]
                tb[j] = ad_bar @ self.W[l]
            gW[l] += a_bar.T @ hs[l]
            gb[l] += a_bar.sum(0)
            hbar[l] = a_bar @ self.W[l]
        loss = diff + sob
        if not math.isfinite(loss):
            raise NumericFailure(f"non-finite loss (diff={diff}, sob={sob}) on batch of {B}")
        return loss, self.flat_grads(gW, gb), (diff, sob)

    def to_dict(self) -> dict:
        return {"dims": self.dims, "activation": self.activation,
                "W": [W.tolist() for W in self.W], "b": [b.tolist() for b in self.b]}

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        dims = d["dims"]
        net = cls(dims[0], dims[1:-1], dims[-1], activation=d["activation"])
        net.W = [np.asarray(W, dtype=float) for W in d["W"]]
        net.b = [np.asarray(b, dtype=float) for b in d["b"]]
        return net


class Adam:
    def __init__(self, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)


def k_embedding(k, dim: int = EMB_DIM) -> np.ndarray:
    """Sinusoidal features of the diffusion step, shape (B, dim)."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = k[:, None] * freqs[None, :]
    return np.hstack([np.sin(ang), np.cos(ang)])


@dataclass(frozen=True)
class Layout:
    T_h: int
    T_o: int
    n_a: int
    n_x: int
    n_u: int
    n_xi: int

    @property
    def n_o(self) -> int:
        return self.n_x + self.n_u

    @property
    def d_out(self) -> int:
        return self.T_h * self.n_a

    @property
    def d_in(self) -> int:
        return self.d_out + EMB_DIM + self.n_xi + self.T_o * self.n_o

    @property
    def x_hist_index(self) -> np.ndarray:
        base = self.d_out + EMB_DIM + self.n_xi
        return np.array([base + o * self.n_o + j for o in range(self.T_o) for j in range(self.n_x)])


class Denoiser:
    """tau0_hat = net([tau_k | emb(k) | xi | o_hist]) on normalised quantities."""

    def __init__(self, layout: Layout, hidden=(64, 64, 64), rng: np.random.Generator | None = None,
                 activation: str = "tanh", K: int = 5, norm: dict | None = None):
        self.layout = layout
        self.K = K
        self.norm = norm
        self.net = MLP(layout.d_in, hidden, layout.d_out, rng, activation)

    @property
    def T_h(self):
        return self.layout.T_h

    @property
    def n_a(self):
        return self.layout.n_a

    def build_input(self, tau_k, k, xi, o_hist) -> np.ndarray:
        tau_k = np.asarray(tau_k, dtype=float)
        B = tau_k.shape[0]
        return np.hstack([tau_k.reshape(B, -1), k_embedding(np.broadcast_to(k, (B,))),
                          np.asarray(xi, dtype=float).reshape(B, -1),
                          np.asarray(o_hist, dtype=float).reshape(B, -1)])

    def forward(self, tau_k, k, xi, o_hist) -> np.ndarray:
        """Batched prediction, shape (B, T_h, n_a)."""
        y = self.net.forward(self.build_input(tau_k, k, xi, o_hist))
        if not np.all(np.isfinite(y)):
            raise NumericFailure("non-finite denoiser output")
        return y.reshape(-1, self.T_h, self.n_a)

    def __call__(self, tau_k, k, xi, o_hist) -> np.ndarray:
        return self.forward(tau_k[None], k, np.asarray(xi)[None], np.asarray(o_hist)[None])[0]

    def forward_with_input_grad(self, tau_k, k, xi, o_hist, v):
        """Prediction and d(v' tau0_hat)/dx_hist, shape (B, T_o * n_x)."""
        Z = self.build_input(tau_k, k, xi, o_hist)
        V = np.asarray(v, dtype=float).reshape(Z.shape[0], -1)
        y, zbar = self.net.input_grad(Z, V)
        return y.reshape(-1, self.T_h, self.n_a), zbar[:, self.layout.x_hist_index]

    def dense_jacobian(self, tau_k, k, xi, o_hist) -> np.ndarray:
        """Full d tau0_hat / d x_hist for one sample, (T_h * n_a, T_o * n_x)."""
        rows = []
        for j in range(self.layout.d_out):
            e = np.zeros((1, self.layout.d_out))
            e[0, j] = 1.0
            rows.append(self.forward_with_input_grad(tau_k[None], k, np.asarray(xi)[None],
                                                     np.asarray(o_hist)[None], e)[1][0])
        return np.array(rows)

    def save(self, path, extra: dict | None = None) -> None:
        d = {"kind": "denoiser", "version": 1, "layout": self.layout.__dict__, "K": self.K,
             "norm": self.norm, "net": self.net.to_dict(), "extra": extra or {}}
        _write_json(path, d)

    @classmethod
    def load(cls, path) -> "Denoiser":
        d = json.loads(Path(path).read_text())
        if d.get("kind") != "denoiser":
            raise ValueError(f"{path} is not a denoiser checkpoint")
        obj = cls.__new__(cls)
        obj.layout = Layout(**d["layout"])
        obj.K = int(d["K"])
        obj.norm = d["norm"]
        obj.net = MLP.from_dict(d["net"])
        return obj


class DirectPolicy:
    """a_hat = net([x | xi]) on normalised quantities, for the MLP baselines."""

    def __init__(self, n_x: int, n_xi: int, n_a: int, hidden=(64, 64, 64),
                 rng: np.random.Generator | None = None, activation: str = "tanh", norm: dict | None = None):
        self.n_x, self.n_xi, self.n_a = n_x, n_xi, n_a
        self.norm = norm
        self.net = MLP(n_x + n_xi, hidden, n_a, rng, activation)

    @property
    def x_index(self) -> np.ndarray:
        return np.arange(self.n_x)

    def forward(self, x, xi) -> np.ndarray:
        y = self.net.forward(np.hstack([np.atleast_2d(x), np.atleast_2d(xi)]))
        if not np.all(np.isfinite(y)):
            raise NumericFailure("non-finite policy output")
        return y

    def __call__(self, x, xi) -> np.ndarray:
        return self.forward(np.asarray(x)[None], np.asarray(xi)[None])[0]

    def save(self, path, extra: dict | None = None) -> None:
        d = {"kind": "direct", "version": 1, "n_x": self.n_x, "n_xi": self.n_xi, "n_a": self.n_a,
             "norm": self.norm, "net": self.net.to_dict(), "extra": extra or {}}
        _write_json(path, d)

    @classmethod
    def load(cls, path) -> "DirectPolicy":
        d = json.loads(Path(path).read_text())
        if d.get("kind") != "direct":
            raise ValueError(f"{path} is not a direct-policy checkpoint")
        obj = cls.__new__(cls)
        obj.n_x, obj.n_xi, obj.n_a = int(d["n_x"]), int(d["n_xi"]), int(d["n_a"])
        obj.norm = d["norm"]
        obj.net = MLP.from_dict(d["net"])
        return obj


def _write_json(path, d: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(d))
    tmp.replace(path)
