"""Compiled inner loops: dynamics, analytic Jacobians, cost expansions and iLQR.

Everything here works on flat float arrays so one compiled solver serves every
system. ``sys_id`` selects the model:

    0  point mass in the plane     x = (px, py, vx, vy), u = (fx, fy)
    1  pendulum                    x = (theta, omega),   u = (tau,)
    2  double pendulum             x = (q1, q2, w1, w2), u = (tau1, tau2)
    3  linear system (LQR oracle)  x' = A x + B u

Angles are measured from the downward vertical, so theta = pi is upright.

Physical parameter layout ``p``:
    point mass      [dt, m]
    pendulum        [dt, m, l, g]
    double pendulum [dt, m1, l1, m2, l2, g]
    linear          [A.ravel(), B.ravel()]

Cost parameter layout ``cp`` (systems 0-2):
    [w_pos, w_u, w_vel, w_term_pos, w_term_vel, u_max, w_bound, w_obs,
     obs_margin, goal_x, goal_y]
For the linear system ``cp = [Q.ravel(), R.ravel(), Q_T.ravel()]`` and the
cost is x'Qx + u'Ru with terminal x'Q_T x.
"""

import math

import numpy as np
from numba import njit

POINT_MASS = 0
PENDULUM = 1
DOUBLE_PENDULUM = 2
LINEAR = 3

STATUS_CONVERGED = 0
STATUS_MAX_ITER = 1
STATUS_NONFINITE = 2
STATUS_REG_SATURATED = 3

_CACHE = True


# --------------------------------------------------------------------------
# dynamics


@njit(cache=_CACHE)
def _double_pendulum_terms(p, q1, q2, w1, w2):
    m1, l1, m2, l2, g = p[1], p[2], p[3], p[4], p[5]
    c2 = math.cos(q2)
    s2 = math.sin(q2)
    s1 = math.sin(q1)
    s12 = math.sin(q1 + q2)
    M11 = (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2.0 * m2 * l1 * l2 * c2
    M12 = m2 * l2 * l2 + m2 * l1 * l2 * c2
    M22 = m2 * l2 * l2
    h = m2 * l1 * l2 * s2
    cor1 = -h * (2.0 * w1 * w2 + w2 * w2)
    cor2 = h * w1 * w1
    G1 = (m1 + m2) * g * l1 * s1 + m2 * g * l2 * s12
    G2 = m2 * g * l2 * s12
    return M11, M12, M22, cor1, cor2, G1, G2


@njit(cache=_CACHE)
def accel(sys_id, p, x, u):
    """Continuous-time acceleration for the mechanical systems."""
    if sys_id == POINT_MASS:
        out = np.empty(2)
        out[0] = u[0] / p[1]
        out[1] = u[1] / p[1]
        return out
    if sys_id == PENDULUM:
        m, l, g = p[1], p[2], p[3]
        out = np.empty(1)
        out[0] = (u[0] - m * g * l * math.sin(x[0])) / (m * l * l)
        return out
    # double pendulum
    M11, M12, M22, cor1, cor2, G1, G2 = _double_pendulum_terms(p, x[0], x[1], x[2], x[3])
    r1 = u[0] - cor1 - G1
    r2 = u[1] - cor2 - G2
    det = M11 * M22 - M12 * M12
    out = np.empty(2)
    out[0] = (M22 * r1 - M12 * r2) / det
    out[1] = (-M12 * r1 + M11 * r2) / det
    return out


@njit(cache=_CACHE)
def clamp(u, u_max):
    out = np.empty_like(u)
    for i in range(u.size):
        out[i] = min(max(u[i], -u_max), u_max)
    return out


@njit(cache=_CACHE)
def step(sys_id, p, x, u):
    """Semi-implicit Euler step; the control is used as given (no clamp)."""
    nx = x.size
    if sys_id == LINEAR:
        nu = u.size
        A = p[: nx * nx].reshape((nx, nx))
        B = p[nx * nx : nx * nx + nx * nu].reshape((nx, nu))
        return A @ x + B @ u
    dt = p[0]
    nq = nx // 2
    acc = accel(sys_id, p, x, u)
    out = np.empty(nx)
    for i in range(nq):
        v_new = x[nq + i] + dt * acc[i]
        out[nq + i] = v_new
        out[i] = x[i] + dt * v_new
    return out


@njit(cache=_CACHE)
def _accel_jacobians(sys_id, p, x, u):
    """Return (dacc/dq, dacc/dv, dacc/du)."""
    if sys_id == POINT_MASS:
        m = p[1]
        dq = np.zeros((2, 2))
        dv = np.zeros((2, 2))
        du = np.eye(2) / m
        return dq, dv, du
    if sys_id == PENDULUM:
        m, l, g = p[1], p[2], p[3]
        dq = np.empty((1, 1))
        dv = np.zeros((1, 1))
        du = np.empty((1, 1))
        dq[0, 0] = -g * math.cos(x[0]) / l
        du[0, 0] = 1.0 / (m * l * l)
        return dq, dv, du
    m1, l1, m2, l2, g = p[1], p[2], p[3], p[4], p[5]
    q1, q2, w1, w2 = x[0], x[1], x[2], x[3]
    M11, M12, M22, cor1, cor2, G1, G2 = _double_pendulum_terms(p, q1, q2, w1, w2)
    det = M11 * M22 - M12 * M12
    Minv = np.empty((2, 2))
    Minv[0, 0] = M22 / det
    Minv[0, 1] = -M12 / det
    Minv[1, 0] = -M12 / det
    Minv[1, 1] = M11 / det
    r = np.empty(2)
    r[0] = u[0] - cor1 - G1
    r[1] = u[1] - cor2 - G2
    qdd = Minv @ r
    c2 = math.cos(q2)
    s2 = math.sin(q2)
    c1 = math.cos(q1)
    c12 = math.cos(q1 + q2)
    h = m2 * l1 * l2 * s2
    hp = m2 * l1 * l2 * c2
    # dr/dq (columns q1, q2), with dM/dq2 q_dd folded in below
    dr = np.empty((2, 2))
    dr[0, 0] = -((m1 + m2) * g * l1 * c1 + m2 * g * l2 * c12)
    dr[1, 0] = -(m2 * g * l2 * c12)
    dr[0, 1] = hp * (2.0 * w1 * w2 + w2 * w2) - m2 * g * l2 * c12
    dr[1, 1] = -hp * w1 * w1 - m2 * g * l2 * c12
    dMq2 = np.empty((2, 2))
    dMq2[0, 0] = -2.0 * m2 * l1 * l2 * s2
    dMq2[0, 1] = -m2 * l1 * l2 * s2
    dMq2[1, 0] = -m2 * l1 * l2 * s2
    dMq2[1, 1] = 0.0
    rhs = dr.copy()
    t = dMq2 @ qdd
    rhs[0, 1] -= t[0]
    rhs[1, 1] -= t[1]
    dq = Minv @ rhs
    drv = np.empty((2, 2))
    drv[0, 0] = 2.0 * h * w2
    drv[1, 0] = -2.0 * h * w1
    drv[0, 1] = 2.0 * h * (w1 + w2)
    drv[1, 1] = 0.0
    dv = Minv @ drv
    return dq, dv, Minv


@njit(cache=_CACHE)
def step_jacobians(sys_id, p, x, u):
    """Return (x_next, A, B) with A = df/dx, B = df/du of :func:`step`."""
    nx = x.size
    nu = u.size
    if sys_id == LINEAR:
        A = p[: nx * nx].reshape((nx, nx)).copy()
        B = p[nx * nx : nx * nx + nx * nu].reshape((nx, nu)).copy()
        return A @ x + B @ u, A, B
    dt = p[0]
    nq = nx // 2
    aq, av, au = _accel_jacobians(sys_id, p, x, u)
    A = np.zeros((nx, nx))
    B = np.zeros((nx, nu))
    for i in range(nq):
        for j in range(nq):
            # v' = v + dt acc ; q' = q + dt v'
            A[nq + i, j] = dt * aq[i, j]
            A[nq + i, nq + j] = dt * av[i, j]
            A[i, j] = dt * dt * aq[i, j]
            A[i, nq + j] = dt * dt * av[i, j]
        A[nq + i, nq + i] += 1.0
        A[i, i] += 1.0
        A[i, nq + i] += dt
        for j in range(nu):
            B[nq + i, j] = dt * au[i, j]
            B[i, j] = dt * dt * au[i, j]
    return step(sys_id, p, x, u), A, B


# --------------------------------------------------------------------------
# costs


@njit(cache=_CACHE)
def end_effector(sys_id, p, x):
    """Return (ee position, d ee/dq (2 x nq), d2 ee/dq2 (2 x nq x nq))."""
    if sys_id == POINT_MASS:
        e = np.array([x[0], x[1]])
        E = np.eye(2)
        H = np.zeros((2, 2, 2))
        return e, E, H
    if sys_id == PENDULUM:
        l = p[2]
        s = math.sin(x[0])
        c = math.cos(x[0])
        e = np.array([l * s, -l * c])
        E = np.empty((2, 1))
        E[0, 0] = l * c
        E[1, 0] = l * s
        H = np.empty((2, 1, 1))
        H[0, 0, 0] = -l * s
        H[1, 0, 0] = l * c
        return e, E, H
    l1, l2 = p[2], p[4]
    s1 = math.sin(x[0])
    c1 = math.cos(x[0])
    s12 = math.sin(x[0] + x[1])
    c12 = math.cos(x[0] + x[1])
    e = np.array([l1 * s1 + l2 * s12, -l1 * c1 - l2 * c12])
    E = np.empty((2, 2))
    E[0, 0] = l1 * c1 + l2 * c12
    E[0, 1] = l2 * c12
    E[1, 0] = l1 * s1 + l2 * s12
    E[1, 1] = l2 * s12
    H = np.empty((2, 2, 2))
    H[0, 0, 0] = -l1 * s1 - l2 * s12
    H[0, 0, 1] = -l2 * s12
    H[0, 1, 0] = -l2 * s12
    H[0, 1, 1] = -l2 * s12
    H[1, 0, 0] = l1 * c1 + l2 * c12
    H[1, 0, 1] = l2 * c12
    H[1, 1, 0] = l2 * c12
    H[1, 1, 1] = l2 * c12
    return e, E, H


@njit(cache=_CACHE)
def _obstacle_terms(e, obs, w_obs, margin, gn):
    """Penalty w * max(0, r + margin - |e - c|)^2 summed over obstacles, in ee space."""
    val = 0.0
    g = np.zeros(2)
    Hs = np.zeros((2, 2))
    for i in range(obs.shape[0]):
        dx = e[0] - obs[i, 0]
        dy = e[1] - obs[i, 1]
        d = math.sqrt(dx * dx + dy * dy)
        s = obs[i, 2] + margin - d
        if s <= 0.0:
            continue
        if d < 1e-12:
            # centre of the obstacle: push along +x, value only well defined
            val += w_obs * s * s
            continue
        nxv = dx / d
        nyv = dy / d
        val += w_obs * s * s
        g[0] += -2.0 * w_obs * s * nxv
        g[1] += -2.0 * w_obs * s * nyv
        # d/de of (-2 w s n) = 2 w n n^T - 2 w s (I - n n^T)/d; the second
        # (curvature) part is dropped in Gauss-Newton mode
        c = 0.0 if gn else s / d
        Hs[0, 0] += 2.0 * w_obs * (nxv * nxv - c * (1.0 - nxv * nxv))
        Hs[1, 1] += 2.0 * w_obs * (nyv * nyv - c * (1.0 - nyv * nyv))
        off = 2.0 * w_obs * (nxv * nyv + c * nxv * nyv)
        Hs[0, 1] += off
        Hs[1, 0] += off
    return val, g, Hs


@njit(cache=_CACHE)
def cost_expansion(sys_id, p, cp, obs, x, u, terminal, gn=False):
    """Value, gradient and Hessian of the stage (or terminal) cost.

    With ``gn`` the Hessian drops the end-effector and obstacle curvature terms
    (Gauss-Newton), which keeps it positive semidefinite.
    """
    nx = x.size
    nu = u.size
    lx = np.zeros(nx)
    lu = np.zeros(nu)
    lxx = np.zeros((nx, nx))
    luu = np.zeros((nu, nu))
    lux = np.zeros((nu, nx))
    if sys_id == LINEAR:
        Q = cp[: nx * nx].reshape((nx, nx))
        R = cp[nx * nx : nx * nx + nu * nu].reshape((nu, nu))
        QT = cp[nx * nx + nu * nu : 2 * nx * nx + nu * nu].reshape((nx, nx))
        if terminal:
            val = x @ (QT @ x)
            lx[:] = (QT + QT.T) @ x
            lxx[:, :] = QT + QT.T
        else:
            val = x @ (Q @ x) + u @ (R @ u)
            lx[:] = (Q + Q.T) @ x
            lxx[:, :] = Q + Q.T
            lu[:] = (R + R.T) @ u
            luu[:, :] = R + R.T
        return val, lx, lu, lxx, luu, lux

    w_pos, w_u, w_vel, w_tpos, w_tvel = cp[0], cp[1], cp[2], cp[3], cp[4]
    u_max, w_b, w_o, margin = cp[5], cp[6], cp[7], cp[8]
    nq = nx // 2
    e, E, H = end_effector(sys_id, p, x)
    r0 = e[0] - cp[9]
    r1 = e[1] - cp[10]
    wp = w_tpos if terminal else w_pos
    wv = w_tvel if terminal else w_vel
    val = wp * (r0 * r0 + r1 * r1)
    # d/dq of w |e - goal|^2
    ge = np.array([2.0 * wp * r0, 2.0 * wp * r1])
    He = 2.0 * wp * np.eye(2)
    oval, og, oH = _obstacle_terms(e, obs, w_o, margin, gn)
    val += oval
    ge += og
    He += oH
    for i in range(nq):
        lx[i] = E[0, i] * ge[0] + E[1, i] * ge[1]
        for j in range(nq):
            acc = 0.0
            for a in range(2):
                for b in range(2):
                    acc += E[a, i] * He[a, b] * E[b, j]
                if not gn:
                    acc += ge[a] * H[a, i, j]
            lxx[i, j] = acc
    for i in range(nq):
        v = x[nq + i]
        val += wv * v * v
        lx[nq + i] += 2.0 * wv * v
        lxx[nq + i, nq + i] += 2.0 * wv
    if not terminal:
        for i in range(nu):
            val += w_u * u[i] * u[i]
            lu[i] += 2.0 * w_u * u[i]
            luu[i, i] += 2.0 * w_u
            s = abs(u[i]) - u_max
            if s > 0.0:
                val += w_b * s * s
                lu[i] += 2.0 * w_b * s * (1.0 if u[i] > 0 else -1.0)
                luu[i, i] += 2.0 * w_b
    return val, lx, lu, lxx, luu, lux


@njit(cache=_CACHE)
def trajectory_cost(sys_id, p, cp, obs, X, U):
    T = U.shape[0]
    J = 0.0
    for t in range(T):
        J += cost_expansion(sys_id, p, cp, obs, X[t], U[t], False)[0]
    J += cost_expansion(sys_id, p, cp, obs, X[T], U[T - 1], True)[0]
    return J


@njit(cache=_CACHE)
def simulate(sys_id, p, x0, U, u_max):
    """Open-loop rollout with clamped controls."""
    T = U.shape[0]
    X = np.empty((T + 1, x0.size))
    X[0] = x0
    for t in range(T):
        X[t + 1] = step(sys_id, p, X[t], clamp(U[t], u_max))
    return X


# --------------------------------------------------------------------------
# iLQR


@njit(cache=_CACHE)
def _chol_solve(M, rhs):
    """Solve M X = rhs for SPD M via Cholesky; returns (ok, X)."""
    n = M.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = M[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if not (s > 0.0) or not math.isfinite(s):
                    return False, rhs
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    m = rhs.shape[1]
    Y = np.empty((n, m))
    for c in range(m):
        for i in range(n):
            s = rhs[i, c]
            for k in range(i):
                s -= L[i, k] * Y[k, c]
            Y[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = Y[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * Y[k, c]
            Y[i, c] = s / L[i, i]
    return True, Y


@njit(cache=_CACHE)
def linearize(sys_id, p, cp, obs, X, U, gn):
    T, nu = U.shape
    nx = X.shape[1]
    As = np.empty((T, nx, nx))
    Bs = np.empty((T, nx, nu))
    lx = np.empty((T + 1, nx))
    lu = np.zeros((T + 1, nu))
    lxx = np.empty((T + 1, nx, nx))
    luu = np.zeros((T + 1, nu, nu))
    lux = np.zeros((T + 1, nu, nx))
    for t in range(T):
        _, A, B = step_jacobians(sys_id, p, X[t], U[t])
        As[t] = A
        Bs[t] = B
        _, a, b, c, d, e = cost_expansion(sys_id, p, cp, obs, X[t], U[t], False, gn)
        lx[t] = a
        lu[t] = b
        lxx[t] = c
        luu[t] = d
        lux[t] = e
    _, a, b, c, d, e = cost_expansion(sys_id, p, cp, obs, X[T], U[T - 1], True, gn)
    lx[T] = a
    lxx[T] = c
    return As, Bs, lx, lu, lxx, luu, lux


@njit(cache=_CACHE)
def backward_pass(As, Bs, lx, lu, lxx, luu, lux, reg):
    """Gauss-Newton value recursion. Returns (ok, k, K, dV1, dV2)."""
    T = As.shape[0]
    nx = As.shape[1]
    nu = Bs.shape[2]
    k = np.zeros((T, nu))
    K = np.zeros((T, nu, nx))
    Vx = lx[T].copy()
    Vxx = lxx[T].copy()
    dV1 = 0.0
    dV2 = 0.0
    rhs = np.empty((nu, nx + 1))
    for t in range(T - 1, -1, -1):
        A = As[t]
        B = Bs[t]
        Qx = lx[t] + A.T @ Vx
        Qu = lu[t] + B.T @ Vx
        VA = Vxx @ A
        Qxx = lxx[t] + A.T @ VA
        Quu = luu[t] + B.T @ (Vxx @ B)
        Qux = lux[t] + B.T @ VA
        Qreg = Quu.copy()
        for i in range(nu):
            Qreg[i, i] += reg
        rhs[:, 0] = Qu
        rhs[:, 1:] = Qux
        ok, sol = _chol_solve(Qreg, rhs)
        if not ok:
            return False, k, K, 0.0, 0.0
        kt = -sol[:, 0]
        Kt = -sol[:, 1:]
        k[t] = kt
        K[t] = Kt
        dV1 += kt @ Qu
        dV2 += 0.5 * kt @ (Quu @ kt)
        Vx = Qx + Kt.T @ (Quu @ kt) + Kt.T @ Qu + Qux.T @ kt
        Vxx = Qxx + Kt.T @ (Quu @ Kt) + Kt.T @ Qux + Qux.T @ Kt
        Vxx = 0.5 * (Vxx + Vxx.T)
    return True, k, K, dV1, dV2


@njit(cache=_CACHE)
def _dynamics_curvature(sys_id, p, x, u, lam, h):
    """Contract d2f with the costate: returns (sum_i lam_i f_i,xx, .._ux, .._uu).

    Second derivatives come from central differences of the analytic Jacobians.
    """
    nx = x.size
    nu = u.size
    Cxx = np.zeros((nx, nx))
    Cux = np.zeros((nu, nx))
    Cuu = np.zeros((nu, nu))
    if sys_id == LINEAR:
        return Cxx, Cux, Cuu
    for j in range(nx):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        _, Ap, Bp = step_jacobians(sys_id, p, xp, u)
        _, Am, Bm = step_jacobians(sys_id, p, xm, u)
        dA = (Ap - Am) / (2.0 * h)
        dB = (Bp - Bm) / (2.0 * h)
        Cxx[:, j] = dA.T @ lam
        Cux[:, j] = dB.T @ lam
    for j in range(nu):
        up = u.copy()
        um = u.copy()
        up[j] += h
        um[j] -= h
        _, Ap, Bp = step_jacobians(sys_id, p, x, up)
        _, Am, Bm = step_jacobians(sys_id, p, x, um)
        Cuu[:, j] = ((Bp - Bm) / (2.0 * h)).T @ lam
    Cxx = 0.5 * (Cxx + Cxx.T)
    Cuu = 0.5 * (Cuu + Cuu.T)
    return Cxx, Cux, Cuu


@njit(cache=_CACHE)
def ddp_gains(sys_id, p, cp, obs, X, U, reg):
    """Feedback gains of a full second-order (DDP) backward pass.

    Uses exact cost Hessians and costate-weighted dynamics curvature, so at a
    strict local optimum K_t is the derivative of the optimal control with
    respect to the state. Returns (ok, K).
    """
    T, nu = U.shape
    nx = X.shape[1]
    As, Bs, lx, lu, lxx, luu, lux = linearize(sys_id, p, cp, obs, X, U, False)
    K = np.zeros((T, nu, nx))
    Vx = lx[T].copy()
    Vxx = lxx[T].copy()
    rhs = np.empty((nu, nx + 1))
    for t in range(T - 1, -1, -1):
        A = As[t]
        B = Bs[t]
        Cxx, Cux, Cuu = _dynamics_curvature(sys_id, p, X[t], U[t], Vx, 1e-5)
        Qx = lx[t] + A.T @ Vx
        Qu = lu[t] + B.T @ Vx
        VA = Vxx @ A
        Qxx = lxx[t] + A.T @ VA + Cxx
        Quu = luu[t] + B.T @ (Vxx @ B) + Cuu
        Qux = lux[t] + B.T @ VA + Cux
        Qreg = Quu.copy()
        for i in range(nu):
            Qreg[i, i] += reg
        rhs[:, 0] = Qu
        rhs[:, 1:] = Qux
        ok, sol = _chol_solve(Qreg, rhs)
        if not ok:
            return False, K
        kt = -sol[:, 0]
        Kt = -sol[:, 1:]
        K[t] = Kt
        Vx = Qx + Kt.T @ (Quu @ kt) + Kt.T @ Qu + Qux.T @ kt
        Vxx = Qxx + Kt.T @ (Quu @ Kt) + Kt.T @ Qux + Qux.T @ Kt
        Vxx = 0.5 * (Vxx + Vxx.T)
    return True, K


@njit(cache=_CACHE)
def forward_pass(sys_id, p, cp, obs, x0, X, U, k, K, alpha, u_max):
    T, nu = U.shape
    Xn = np.empty_like(X)
    Un = np.empty_like(U)
    Xn[0] = x0
    J = 0.0
    for t in range(T):
        u = U[t] + alpha * k[t] + K[t] @ (Xn[t] - X[t])
        Un[t] = u
        J += cost_expansion(sys_id, p, cp, obs, Xn[t], u, False)[0]
        Xn[t + 1] = step(sys_id, p, Xn[t], clamp(u, u_max))
    J += cost_expansion(sys_id, p, cp, obs, Xn[T], Un[T - 1], True)[0]
    return Xn, Un, J


@njit(cache=_CACHE)
def _all_finite(a):
    for v in a.ravel():
        if not math.isfinite(v):
            return False
    return True


@njit(cache=_CACHE)
def ilqr(sys_id, p, cp, obs, x0, X0, U0, u_max, n_max, cost_tol, grad_tol,
         reg_init, reg_min, reg_max, ls_max_steps, ls_backtrack, armijo):
    """iLQR with Levenberg-Marquardt regularisation and backtracking line search.

    Returns (X, U, K, cost, iters, status, ls_failures, cost_history).
    ``cost_history`` holds the cost after every accepted iteration (first entry
    is the cost of the initial feasible trajectory).
    """
    T, nu = U0.shape
    nx = x0.size
    hist = np.full(n_max + 2, np.nan)
    n_hist = 0
    iters = 0
    ls_failures = 0
    status = STATUS_MAX_ITER
    reg = reg_init

    X = X0.copy()
    U = U0.copy()
    Xs = simulate(sys_id, p, x0, U, u_max)
    gap = 0.0
    for t in range(T + 1):
        for i in range(nx):
            gap = max(gap, abs(Xs[t, i] - X[t, i]))
    if gap > 1e-9 or not _all_finite(X):
        # infeasible guess: one closed-loop pass tracking the given states
        done = False
        if _all_finite(X) and _all_finite(U):
            As, Bs, lx, lu, lxx, luu, lux = linearize(sys_id, p, cp, obs, X, U, True)
            while reg <= reg_max:
                ok, k, K, dV1, dV2 = backward_pass(As, Bs, lx, lu, lxx, luu, lux, reg)
                if ok:
                    Xn, Un, Jn = forward_pass(sys_id, p, cp, obs, x0, X, U, k, K, 1.0, u_max)
                    if math.isfinite(Jn) and _all_finite(Xn):
                        X = Xn
                        U = Un
                        done = True
                    break
                reg *= 10.0
            iters += 1
        if not done:
            X = Xs
    J = trajectory_cost(sys_id, p, cp, obs, X, U)
    if not math.isfinite(J):
        K = np.zeros((T, nu, nx))
        return X, U, K, J, iters, STATUS_NONFINITE, ls_failures, hist[:0]
    hist[n_hist] = J
    n_hist += 1
    reg = max(reg_init, reg_min)

    while iters < n_max:
        iters += 1
        As, Bs, lx, lu, lxx, luu, lux = linearize(sys_id, p, cp, obs, X, U, True)
        ok = False
        while True:
            ok, k, K, dV1, dV2 = backward_pass(As, Bs, lx, lu, lxx, luu, lux, reg)
            if ok:
                break
            reg *= 10.0
            if reg > reg_max:
                break
        if not ok:
            status = STATUS_REG_SATURATED
            break
        expected = -(dV1 + dV2)
        if expected < grad_tol:
            # stationary: still take the full step when it does not hurt, which
            # removes the bias left by the regulariser on the previous step
            Xn, Un, Jn = forward_pass(sys_id, p, cp, obs, x0, X, U, k, K, 1.0, u_max)
            if math.isfinite(Jn) and Jn <= J:
                X = Xn
                U = Un
                J = Jn
                hist[n_hist] = J
                n_hist += 1
            status = STATUS_CONVERGED
            break
        alpha = 1.0
        accepted = False
        Jn = J
        for _ in range(ls_max_steps):
            Xn, Un, Jn = forward_pass(sys_id, p, cp, obs, x0, X, U, k, K, alpha, u_max)
            if math.isfinite(Jn):
                pred = -(alpha * dV1 + alpha * alpha * dV2)
                if J - Jn >= armijo * pred and J - Jn >= 0.0:
                    accepted = True
                    break
            alpha *= ls_backtrack
        if accepted:
            rel = (J - Jn) / max(abs(J), 1e-300)
            X = Xn
            U = Un
            J = Jn
            hist[n_hist] = J
            n_hist += 1
            reg = max(reg / 2.0, reg_min)
            # a backtracked step says nothing about stationarity, so only full
            # Newton steps can trigger the cost-decrease test
            if rel < cost_tol and alpha == 1.0:
                status = STATUS_CONVERGED
                break
        else:
            ls_failures += 1
            if expected < cost_tol * abs(J):
                # model predicts a relative change below tolerance: the failure
                # is round-off at the optimum, not a bad direction
                status = STATUS_CONVERGED
                break
            reg *= 10.0
            if reg > reg_max:
                status = STATUS_REG_SATURATED
                break

    # gains reported at the returned trajectory: exact second-order pass when
    # it is well posed there, otherwise the regularised Gauss-Newton one
    ok, K = ddp_gains(sys_id, p, cp, obs, X, U, 0.0)
    if not ok:
        As, Bs, lx, lu, lxx, luu, lux = linearize(sys_id, p, cp, obs, X, U, True)
        r = 0.0
        ok, k, K, dV1, dV2 = backward_pass(As, Bs, lx, lu, lxx, luu, lux, r)
        while not ok:
            r = reg_min if r == 0.0 else r * 10.0
            if r > reg_max:
                K = np.zeros((T, nu, nx))
                break
            ok, k, K, dV1, dV2 = backward_pass(As, Bs, lx, lu, lxx, luu, lux, r)
    if not _all_finite(X):
        status = STATUS_NONFINITE
    return X, U, K, J, iters, status, ls_failures, hist[:n_hist]
