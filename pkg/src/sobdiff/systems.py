"""Desk-scale dynamical systems, their costs and task sampling."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from sobdiff import _kernels as kern

_SYS_IDS = {"point_mass_2d": kern.POINT_MASS, "pendulum": kern.PENDULUM,
            "double_pendulum": kern.DOUBLE_PENDULUM, "linear": kern.LINEAR}
_DIMS = {"point_mass_2d": (4, 2), "pendulum": (2, 1), "double_pendulum": (4, 2)}


class NumericFailure(RuntimeError):
    """A dynamics, cost or network evaluation produced a non-finite value."""


@dataclass(frozen=True)
class SystemSpec:
    """Static description of one control task family.

    Physical quantities are SI. ``masses``/``lengths`` hold one entry per link
    (a single entry for the point mass and the pendulum). Obstacles are rows
    ``(cx, cy, radius)`` in end-effector space.
    """

    name: str
    dt: float
    T: int
    action_mode: str = "u"
    u_max: float = 25.0
    masses: tuple = (1.0,)
    lengths: tuple = (1.0,)
    gravity: float = 9.81
    w_pos: float = 10.0
    w_u: float = 0.1
    w_vel: float = 0.0
    w_term_pos: float = 10.0
    w_term_vel: float = 1.0
    w_bound: float = 100.0
    w_obs: float = 200.0
    obs_margin: float = 0.05
    obstacles: tuple = ()
    # sampling distribution of task parameters
    start_angle_range: tuple = (-0.5, 0.5)
    workspace: tuple = (0.0, 1.0, 0.0, 1.0)

    def __post_init__(self):
        if self.name not in _DIMS:
            raise ValueError(f"unknown system {self.name!r}")
        if self.dt <= 0 or self.T < 2:
            raise ValueError("need dt > 0 and T >= 2")
        if self.action_mode not in ("u", "x"):
            raise ValueError("action_mode must be 'u' or 'x'")
        for ob in self.obstacles:
            if len(ob) != 3 or ob[2] <= 0:
                raise ValueError(f"bad obstacle {ob}")

    @property
    def sys_id(self) -> int:
        return _SYS_IDS[self.name]

    @property
    def n_x(self) -> int:
        return _DIMS[self.name][0]

    @property
    def n_u(self) -> int:
        return _DIMS[self.name][1]

    @property
    def n_q(self) -> int:
        return self.n_x // 2

    @property
    def n_a(self) -> int:
        return self.n_u if self.action_mode == "u" else self.n_x

    def phys_params(self) -> np.ndarray:
        if self.name == "point_mass_2d":
            return np.array([self.dt, self.masses[0]], dtype=float)
        if self.name == "pendulum":
            return np.array([self.dt, self.masses[0], self.lengths[0], self.gravity], dtype=float)
        m1, m2 = self.masses
        l1, l2 = self.lengths
        return np.array([self.dt, m1, l1, m2, l2, self.gravity], dtype=float)

    @property
    def angle_windows(self) -> tuple:
        """(state index, window centre) for every revolute coordinate."""
        if self.name == "pendulum":
            return ((0, 0.5 * np.pi),)
        if self.name == "double_pendulum":
            return ((0, 0.5 * np.pi), (1, 0.0))
        return ()

    def obstacle_array(self) -> np.ndarray:
        return np.asarray(self.obstacles, dtype=float).reshape(-1, 3)

    def upright_goal(self) -> np.ndarray:
        return np.array([0.0, float(sum(self.lengths))])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["obstacles"] = [list(o) for o in self.obstacles]
        for key in ("masses", "lengths", "start_angle_range", "workspace"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        d = {k: v for k, v in d.items() if k not in ("n_x", "n_u", "n_a")}
        d["obstacles"] = tuple(tuple(float(v) for v in o) for o in d.get("obstacles", ()))
        for key in ("masses", "lengths", "start_angle_range", "workspace"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class TaskParams:
    """One problem instance: initial state, end-effector goal, obstacles."""

    x_init: np.ndarray
    goal: np.ndarray
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def features(self) -> np.ndarray:
        """Flat conditioning vector fed to the learned policies."""
        return np.concatenate([self.x_init, self.goal, np.ravel(self.obstacles)])

    def to_dict(self) -> dict:
        return {"x_init": self.x_init.tolist(), "goal": self.goal.tolist(),
                "obstacles": np.asarray(self.obstacles).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskParams":
        return cls(np.asarray(d["x_init"], dtype=float), np.asarray(d["goal"], dtype=float),
                   np.asarray(d["obstacles"], dtype=float).reshape(-1, 3))

    def __eq__(self, other):
        if not isinstance(other, TaskParams):
            return NotImplemented
        return (np.array_equal(self.x_init, other.x_init) and np.array_equal(self.goal, other.goal)
                and np.array_equal(self.obstacles, other.obstacles))


def make_system(name: str, **overrides) -> SystemSpec:
    """Default task families; keyword overrides replace any field."""
    if name == "point_mass_2d":
        base = dict(name=name, dt=0.05, T=60, action_mode="x", u_max=5.0, masses=(1.0,),
                    lengths=(0.0,), w_pos=1.0, w_u=0.1, w_vel=0.0, w_term_pos=100.0,
                    w_term_vel=10.0, obstacles=((0.5, 0.5, 0.15),), workspace=(0.0, 1.0, 0.0, 1.0))
    elif name == "pendulum":
        base = dict(name=name, dt=0.02, T=150, action_mode="u", u_max=25.0, masses=(1.0,),
                    lengths=(1.0,), w_pos=10.0, w_u=0.1, w_term_pos=10.0, w_term_vel=1.0)
    elif name == "double_pendulum":
        base = dict(name=name, dt=0.02, T=150, action_mode="u", u_max=25.0, masses=(1.0, 1.0),
                    lengths=(1.0, 1.0), w_pos=10.0, w_u=0.1, w_term_pos=10.0, w_term_vel=1.0)
    else:
        raise ValueError(f"unknown system {name!r}")
    base.update(overrides)
    return SystemSpec(**base)


def _check(spec: SystemSpec, x, u=None):
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n_x,):
        raise ValueError(f"state must have shape ({spec.n_x},), got {x.shape}")
    if u is None:
        return x
    u = np.asarray(u, dtype=float)
    if u.shape != (spec.n_u,):
        raise ValueError(f"control must have shape ({spec.n_u},), got {u.shape}")
    return x, u


def step(spec: SystemSpec, x, u) -> np.ndarray:
    """One semi-implicit Euler step. ``u`` is used as given; clamp beforehand if needed."""
    x, u = _check(spec, x, u)
    out = kern.step(spec.sys_id, spec.phys_params(), x, u)
    if not np.all(np.isfinite(out)):
        raise NumericFailure(f"non-finite state after step from {x} with {u}")
    return out


def clamp(spec: SystemSpec, u) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=float), -spec.u_max, spec.u_max)


def jacobians(spec: SystemSpec, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (A, B) = (df/dx, df/du)."""
    x, u = _check(spec, x, u)
    _, A, B = kern.step_jacobians(spec.sys_id, spec.phys_params(), x, u)
    return A, B


def cost_params(spec: SystemSpec, task: TaskParams) -> np.ndarray:
    return np.array([spec.w_pos, spec.w_u, spec.w_vel, spec.w_term_pos, spec.w_term_vel,
                     spec.u_max, spec.w_bound, spec.w_obs, spec.obs_margin,
                     task.goal[0], task.goal[1]], dtype=float)


def cost_expansion(spec: SystemSpec, task: TaskParams, t: int, x, u):
    """(l, l_x, l_u, l_xx, l_uu, l_ux) of the stage cost, or of the terminal cost at t = T."""
    if not 0 <= t <= spec.T:
        raise ValueError(f"t={t} outside [0, {spec.T}]")
    x, u = _check(spec, x, u)
    return kern.cost_expansion(spec.sys_id, spec.phys_params(), cost_params(spec, task),
                               np.asarray(task.obstacles, dtype=float).reshape(-1, 3),
                               x, u, t == spec.T)


def angle_shift(spec: SystemSpec, x) -> np.ndarray:
    """Multiple of 2 pi per coordinate that moves the joint angles of ``x`` into [c - pi, c + pi).

    Dynamics and costs are 2 pi-periodic in the joint angles, so ``x + shift``
    is the same physical state; the shift is locally constant, so derivatives
    taken in shifted coordinates equal the unshifted ones.
    """
    x = np.asarray(x, dtype=float)
    s = np.zeros(spec.n_x)
    for i, c in spec.angle_windows:
        s[i] = -2.0 * np.pi * np.floor((x[i] - c + np.pi) / (2.0 * np.pi))
    return s


def end_effector(spec: SystemSpec, x) -> np.ndarray:
    return kern.end_effector(spec.sys_id, spec.phys_params(), _check(spec, x))[0]


def trajectory_cost(spec: SystemSpec, task: TaskParams, X, U) -> float:
    """J(X, U; xi): summed stage costs plus terminal cost."""
    return float(kern.trajectory_cost(spec.sys_id, spec.phys_params(), cost_params(spec, task),
                                      np.asarray(task.obstacles, dtype=float).reshape(-1, 3),
                                      np.asarray(X, dtype=float), np.asarray(U, dtype=float)))


def simulate(spec: SystemSpec, x0, U) -> np.ndarray:
    """Roll out clamped controls from ``x0``."""
    return kern.simulate(spec.sys_id, spec.phys_params(), np.asarray(x0, dtype=float),
                         np.asarray(U, dtype=float), spec.u_max)


def goal_state(spec: SystemSpec, task: TaskParams) -> np.ndarray:
    """Rest state whose end effector sits on the goal."""
    if spec.name == "point_mass_2d":
        return np.array([task.goal[0], task.goal[1], 0.0, 0.0])
    if spec.name == "pendulum":
        return np.array([np.pi, 0.0])
    return np.array([np.pi, 0.0, 0.0, 0.0])


def _inside_obstacle(spec: SystemSpec, pos, clearance: float) -> bool:
    for cx, cy, r in spec.obstacles:
        if np.hypot(pos[0] - cx, pos[1] - cy) <= r + clearance:
            return True
    return False


def sample_task(spec: SystemSpec, rng: np.random.Generator) -> TaskParams:
    """Draw xi from the task distribution of ``spec``."""
    obs = spec.obstacle_array()
    if spec.name in ("pendulum", "double_pendulum"):
        lo, hi = spec.start_angle_range
        x0 = np.zeros(spec.n_x)
        x0[0] = rng.uniform(lo, hi)
        return TaskParams(x0, spec.upright_goal(), obs)
    x_lo, x_hi, y_lo, y_hi = spec.workspace
    clearance = spec.obs_margin
    pts = []
    for _ in range(2):
        for _ in range(1000):
            pos = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)])
            if not _inside_obstacle(spec, pos, clearance):
                break
        else:
            raise RuntimeError("could not sample a collision-free point in 1000 tries")
        pts.append(pos)
    x0 = np.array([pts[0][0], pts[0][1], 0.0, 0.0])
    return TaskParams(x0, pts[1], obs)


def interpolate_init(spec: SystemSpec, task: TaskParams) -> tuple[np.ndarray, np.ndarray]:
    """Straight-line state guess from x_init to the goal state, zero controls."""
    x_goal = goal_state(spec, task)
    s = np.linspace(0.0, 1.0, spec.T + 1)[:, None]
    X0 = (1.0 - s) * task.x_init[None, :] + s * x_goal[None, :]
    return X0, np.zeros((spec.T, spec.n_u))
