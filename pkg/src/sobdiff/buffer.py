"""Trajectory store: normalisation, chunk sampling with derivative targets, NDJSON persistence.

Chunk layout, with ``t`` the current time and ``T_o`` the history length:

* ``x_hist`` = x_{t-T_o+1 .. t}; ``o_hist`` rows are (x_s, u_{s-1}) for the same s.
* state actions (``a = x``): tau0 = x_{t-T_o+1 .. t-T_o+T_h}, so the first
  T_o rows repeat ``x_hist``.
* control actions (``a = u``): tau0 = u_{t-T_o .. t-T_o+T_h-1}; the first T_o
  rows are the controls already applied, row T_o is u_t, the first one to play.

Controls before t = 0 are zero. Joint angles in ``x_hist``, ``o_hist`` and
state actions are moved by the 2 pi multiple that puts x_t in the policy
window (``systems.angle_shift``); J_target is unaffected by the shift.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sobdiff.sensitivity import chunk_jacobian, closed_loop_from_matrices
from sobdiff.systems import SystemSpec, TaskParams, angle_shift

NDJSON_KEYS = ("xi", "X", "U", "K", "A", "B", "cost", "iters", "source")
WIDTH_FLOOR = 1e-6


@dataclass
class TrajectoryRecord:
    xi: TaskParams
    X: np.ndarray
    U: np.ndarray
    K: np.ndarray
    A: np.ndarray
    B: np.ndarray
    cost: float
    iters: int
    source: str = "cold"

    def __post_init__(self):
        T = len(self.U)
        if self.X.shape[0] != T + 1 or self.K.shape[0] != T or self.A.shape[0] != T:
            raise ValueError("inconsistent trajectory record dimensions")
        if not math.isfinite(self.cost):
            raise ValueError("record cost must be finite")

    @property
    def T(self) -> int:
        return len(self.U)

    def to_json(self) -> str:
        d = {"xi": self.xi.to_dict(), "X": self.X.tolist(), "U": self.U.tolist(),
             "K": self.K.tolist(), "A": self.A.tolist(), "B": self.B.tolist(),
             "cost": self.cost, "iters": self.iters, "source": self.source}
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        missing = [k for k in NDJSON_KEYS if k not in d]
        if missing:
            raise KeyError(f"missing keys {missing}")
        return cls(xi=TaskParams.from_dict(d["xi"]), X=np.asarray(d["X"], dtype=float),
                   U=np.asarray(d["U"], dtype=float), K=np.asarray(d["K"], dtype=float),
                   A=np.asarray(d["A"], dtype=float), B=np.asarray(d["B"], dtype=float),
                   cost=float(d["cost"]), iters=int(d["iters"]), source=str(d["source"]))

    def __eq__(self, other):
        if not isinstance(other, TrajectoryRecord):
            return NotImplemented
        return (self.xi == other.xi and all(np.array_equal(getattr(self, k), getattr(other, k))
                                            for k in ("X", "U", "K", "A", "B"))
                and self.cost == other.cost and self.iters == other.iters and self.source == other.source)


@dataclass
class Chunk:
    tau0: np.ndarray
    o_hist: np.ndarray
    x_hist: np.ndarray
    a_hist: np.ndarray
    xi: np.ndarray
    J_target: np.ndarray
    record: int = -1
    t: int = -1


@dataclass
class _Affine:
    offset: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> "_Affine":
        lo = data.min(axis=0)
        hi = data.max(axis=0)
        return cls(0.5 * (hi + lo), np.maximum(0.5 * (hi - lo), WIDTH_FLOOR))

    def norm(self, v):
        return (v - self.offset) / self.scale

    def denorm(self, v):
        return v * self.scale + self.offset


@dataclass
class NormStats:
    """Per-dimension affine maps to [-1, 1] for actions, observations and xi."""

    action: _Affine
    obs: _Affine
    xi: _Affine
    n_x: int

    def norm_action(self, a):
        return self.action.norm(a)

    def denorm_action(self, a):
        return self.action.denorm(a)

    def norm_obs(self, o):
        return self.obs.norm(o)

    def norm_xi(self, xi):
        return self.xi.norm(xi)

    def norm_jacobian(self, J: np.ndarray, T_h: int, T_o: int) -> np.ndarray:
        """J_norm = S_a J S_x^-1 with S the diagonal scale maps (tiled over time)."""
        inv_sa = np.tile(1.0 / self.action.scale, T_h)
        sx = np.tile(self.obs.scale[: self.n_x], T_o)
        return inv_sa[:, None] * J * sx[None, :]

    def to_dict(self) -> dict:
        return {name: {"offset": getattr(self, name).offset.tolist(), "scale": getattr(self, name).scale.tolist()}
                for name in ("action", "obs", "xi")} | {"n_x": self.n_x}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        mk = lambda e: _Affine(np.asarray(e["offset"], dtype=float), np.asarray(e["scale"], dtype=float))
        return cls(mk(d["action"]), mk(d["obs"]), mk(d["xi"]), int(d["n_x"]))


def observation_rows(X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Rows (x_t, u_{t-1}) for t = 0..T, with u_{-1} = 0."""
    Uprev = np.vstack([np.zeros((1, U.shape[1])), U])
    return np.hstack([X, Uprev])


def row_shifts(spec: SystemSpec, X: np.ndarray) -> np.ndarray:
    """Per-row 2 pi shifts putting each state's joint angles in the policy window."""
    return np.array([angle_shift(spec, x) for x in X]).reshape(len(X), spec.n_x)


def history_obs(X_hist, U_prev) -> np.ndarray:
    return np.hstack([np.asarray(X_hist, float), np.asarray(U_prev, float)])


class Buffer:
    """In-memory dataset D of solved trajectories for one system."""

    def __init__(self, spec: SystemSpec):
        self.spec = spec
        self.records: list[TrajectoryRecord] = []
        self._jac_cache: dict[int, object] = {}

    def insert(self, record: TrajectoryRecord) -> None:
        if record.X.shape[1] != self.spec.n_x or record.U.shape[1] != self.spec.n_u:
            raise ValueError("record dimensions do not match the buffer's system")
        self.records.append(record)

    def extend(self, records) -> None:
        for r in records:
            self.insert(r)

    def reset(self) -> None:
        self.records = []
        self._jac_cache = {}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    # ------------------------------------------------------------------
    def actions(self, rec: TrajectoryRecord) -> np.ndarray:
        return rec.U if self.spec.action_mode == "u" else rec.X

    def fit_norm(self) -> NormStats:
        if not self.records:
            raise ValueError("cannot fit normalisation on an empty buffer")
        acts, obs = [], []
        for r in self.records:
            sh = row_shifts(self.spec, r.X)
            o = observation_rows(r.X, r.U)
            o[:, :self.spec.n_x] += sh
            obs.append(o)
            acts.append(r.X + sh if self.spec.action_mode == "x" else r.U)
        acts, obs = np.vstack(acts), np.vstack(obs)
        xis = np.vstack([r.xi.features() for r in self.records])
        return NormStats(_Affine.fit(acts), _Affine.fit(obs), _Affine.fit(xis), self.spec.n_x)

    def epoch_size(self, T_h: int) -> int:
        """Number of chunk samples in one diffusion-training epoch."""
        return math.ceil(sum((r.T - T_h) / T_h for r in self.records))

    def epoch_size_direct(self) -> int:
        """Number of state-action pairs in one direct-policy epoch."""
        return sum(r.T for r in self.records)

    def time_range(self, T_h: int, T_o: int) -> tuple[int, int]:
        """Inclusive range of admissible current times t."""
        T = min(r.T for r in self.records)
        if T < T_h:
            raise ValueError(f"trajectories of length {T} are shorter than T_h={T_h}")
        return T_o - 1, T - T_h

    def _closed_loop(self, i: int):
        jac = self._jac_cache.get(i)
        if jac is None:
            r = self.records[i]
            jac = closed_loop_from_matrices(r.A, r.B, r.K, self.spec.action_mode)
            self._jac_cache[i] = jac
        return jac

    def make_chunk(self, i: int, t: int, T_h: int, T_o: int) -> Chunk:
        """Chunk of record ``i`` at current time ``t`` (physical units)."""
        r = self.records[i]
        spec = self.spec
        lo, hi = T_o - 1, r.T - T_h
        if not lo <= t <= hi:
            raise ValueError(f"t={t} outside [{lo}, {hi}]")
        s0 = t - T_o + 1
        # joint angles are moved by one common 2 pi multiple, chosen on the current state
        shift = angle_shift(spec, r.X[t])
        x_hist = r.X[s0:t + 1] + shift
        obs = observation_rows(r.X, r.U)[s0:t + 1]
        obs[:, :spec.n_x] += shift
        jac = self._closed_loop(i)
        if spec.action_mode == "x":
            tau0 = r.X[s0:s0 + T_h] + shift
            J = chunk_jacobian(jac, s0, T_h, T_o, lag=0)
        else:
            a0 = s0 - 1
            tau0 = np.vstack([np.zeros((max(0, -a0), spec.n_u)), r.U[max(a0, 0):a0 + T_h]])
            if a0 >= 0:
                J = chunk_jacobian(jac, a0, T_h, T_o, lag=1)
            else:
                # the padded u_{-1} row carries no state dependence
                J = np.zeros((T_h * spec.n_u, T_o * spec.n_x))
                J[spec.n_u:] = chunk_jacobian(jac, 0, T_h - 1, T_o, lag=0)
        a_hist = tau0[:T_o].copy()
        return Chunk(tau0=tau0.copy(), o_hist=obs.copy(), x_hist=x_hist.copy(), a_hist=a_hist,
                     xi=r.xi.features(), J_target=J, record=i, t=t)

    def sample_chunk(self, rng: np.random.Generator, T_h: int, T_o: int) -> Chunk:
        if not self.records:
            raise ValueError("empty buffer")
        lo, hi = self.time_range(T_h, T_o)
        i = int(rng.integers(len(self.records)))
        t = int(rng.integers(lo, self.records[i].T - T_h + 1))
        return self.make_chunk(i, t, T_h, T_o)

    # ------------------------------------------------------------------
    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w") as fh:
            for r in self.records:
                fh.write(r.to_json())
                fh.write("\n")
        tmp.replace(path)

    @classmethod
    def load(cls, path, spec: SystemSpec) -> "Buffer":
        """Read an NDJSON buffer; any malformed line aborts the whole load."""
        records = []
        with open(path) as fh:
            text = fh.read()
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        elif lines:
            raise ValueError(f"{path}: line {len(lines)}: truncated record (missing newline)")
        for n, line in enumerate(lines, start=1):
            try:
                records.append(TrajectoryRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as err:
                raise ValueError(f"{path}: line {n}: {err}") from err
        buf = cls(spec)
        buf.extend(records)
        return buf


@dataclass
class ChunkTable:
    """All admissible chunks of a buffer, normalised, stacked for fast batching."""

    tau0: np.ndarray
    obs: np.ndarray
    xi: np.ndarray
    J: np.ndarray
    record: np.ndarray
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform record, then uniform admissible time within it."""
        recs = rng.integers(len(self.counts), size=n)
        within = np.floor(rng.random(n) * self.counts[recs]).astype(int)
        return self.offsets[recs] + within


def build_chunk_table(buf: Buffer, norm: NormStats, T_h: int, T_o: int) -> ChunkTable:
    lo, _ = buf.time_range(T_h, T_o)
    taus, obs, xis, Js, recs, counts = [], [], [], [], [], []
    for i, r in enumerate(buf.records):
        ts = range(lo, r.T - T_h + 1)
        counts.append(len(ts))
        for t in ts:
            c = buf.make_chunk(i, t, T_h, T_o)
            taus.append(norm.norm_action(c.tau0))
            obs.append(norm.norm_obs(c.o_hist))
            xis.append(norm.norm_xi(c.xi))
            Js.append(norm.norm_jacobian(c.J_target, T_h, T_o))
            recs.append(i)
    counts = np.asarray(counts, dtype=int)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int)
    return ChunkTable(np.asarray(taus), np.asarray(obs), np.asarray(xis), np.asarray(Js),
                      np.asarray(recs), offsets, counts)
