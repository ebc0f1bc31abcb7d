"""Parameterised vector fields, Runge-Kutta propagation and an SDE reference.

Array convention: the leading axis is the component axis and any trailing
axes are batch axes. A field evaluated at ``x`` of shape ``(N_x, K)`` with
``p`` of shape ``(N_p, K)`` returns ``(N_x, K)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import StepUnderflow, ZeroInertia

__all__ = [
    "TychasticVectorField",
    "ControlSolution",
    "Trajectory",
    "SDEModel",
    "zermelo_field",
    "hst_field",
    "rk4_step",
    "rk4_propagate",
    "propagate_rk45",
    "euler_maruyama",
    "explicit_euler",
    "write_trajectory_csv",
]


def _fd_step(v):
    return 1e-6 * (1.0 + np.abs(v))


@dataclass(frozen=True, eq=False)
class TychasticVectorField:
    """Right-hand side ``f(x, u, t; p)`` of a parameter-dependent ODE.

    ``rhs`` must broadcast over trailing batch axes. ``jac`` is optional and
    returns ``(df/dx, df/du)`` with shapes ``(N_x, N_x, ...)`` and
    ``(N_x, N_u, ...)``; without it central differences are used.
    """

    n_x: int
    n_u: int
    n_p: int
    rhs: Callable
    jac: Optional[Callable] = None
    autonomous: bool = True
    name: str = "field"
    state_names: tuple = ()
    control_names: tuple = ()
    nominal: Optional[np.ndarray] = None

    def __call__(self, x, u, t, p=None):
        if p is None:
            p = self.nominal
        return self.rhs(np.asarray(x, dtype=float), np.asarray(u, dtype=float), t,
                        np.asarray(p, dtype=float))

    def bind(self, p):
        """Fix the parameter; returns ``f(x, u, t)``."""
        p = np.asarray(p, dtype=float)
        return lambda x, u, t: self(x, u, t, p)

    def jacobians(self, x, u, t, p):
        """Return ``(df/dx, df/du)``, analytic when available."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        p = np.asarray(p, dtype=float)
        if self.jac is not None:
            return self.jac(x, u, t, p)
        shape = np.broadcast_shapes(x.shape[1:], u.shape[1:], np.shape(t),
                                    p.shape[1:])
        x = np.broadcast_to(x, (self.n_x,) + shape)
        u = np.broadcast_to(u, (self.n_u,) + shape)
        A = np.empty((self.n_x, self.n_x) + shape)
        B = np.empty((self.n_x, self.n_u) + shape)
        for j in range(self.n_x):
            h = _fd_step(x[j])
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            A[:, j] = (self(xp, u, t, p) - self(xm, u, t, p)) / (2 * h)
        for j in range(self.n_u):
            h = _fd_step(u[j])
            up, um = u.copy(), u.copy()
            up[j] += h
            um[j] -= h
            B[:, j] = (self(x, up, t, p) - self(x, um, t, p)) / (2 * h)
        return A, B

    def time_derivative(self, x, u, t, p):
        """Partial derivative with respect to ``t`` (zero when autonomous)."""
        if self.autonomous:
            return np.zeros_like(self(x, u, t, p))
        t = np.asarray(t, dtype=float)
        h = _fd_step(t)
        return (self(x, u, t + h, p) - self(x, u, t - h, p)) / (2 * h)


# ---------------------------------------------------------------------------
# built-in fields


def _zermelo_rhs(x, u, t, p):
    return np.stack(np.broadcast_arrays(p[0] * x[1] + u[0], p[1] * x[0] + u[1]))


def _zermelo_jac(x, u, t, p):
    shape = np.broadcast_shapes(x.shape[1:], u.shape[1:], np.shape(t), p.shape[1:])
    A = np.zeros((2, 2) + shape)
    A[0, 1] = p[0]
    A[1, 0] = p[1]
    B = np.zeros((2, 2) + shape)
    B[0, 0] = B[1, 1] = 1.0
    return A, B


def zermelo_field(p=None):
    """Ship steering in the linear cross-wind ``W(x, y) = (p y, q x)``.

    ``p`` (optional) sets the default wind parameters used when a call omits
    them.
    """
    nominal = None if p is None else np.asarray(p, dtype=float)
    return TychasticVectorField(
        2, 2, 2, _zermelo_rhs, _zermelo_jac, name="zermelo",
        state_names=("x", "y"), control_names=("u1", "u2"), nominal=nominal)


def _gyro_coefficients(p, convention):
    p1, p2, p3 = p[0], p[1], p[2]
    if np.any(p1 <= 0) or np.any(p2 <= 0) or np.any(p3 <= 0):
        raise ZeroInertia("principal moments of inertia must be positive")
    k1 = (p3 - p2) / p1
    k2 = (p1 - p3) / p2
    k3 = (p1 - p2) / p3 if convention == "paper" else (p2 - p1) / p3
    return k1, k2, k3


def _make_hst(convention):
    def rhs(x, u, t, p):
        q1, q2, q3, q4, w1, w2, w3 = x
        k1, k2, k3 = _gyro_coefficients(p, convention)
        out = (
            0.5 * (w1 * q4 - w2 * q3 + w3 * q2),
            0.5 * (w1 * q3 + w2 * q4 - w3 * q1),
            0.5 * (-w1 * q2 + w2 * q1 + w3 * q4),
            0.5 * (-w1 * q1 - w2 * q2 - w3 * q3),
            u[0] / p[0] - k1 * w2 * w3,
            u[1] / p[1] - k2 * w1 * w3,
            u[2] / p[2] - k3 * w1 * w2,
        )
        return np.stack(np.broadcast_arrays(*out))

    def jac(x, u, t, p):
        q1, q2, q3, q4, w1, w2, w3 = x
        k1, k2, k3 = _gyro_coefficients(p, convention)
        shape = np.broadcast_shapes(x.shape[1:], u.shape[1:], np.shape(t), p.shape[1:])
        A = np.zeros((7, 7) + shape)
        # quaternion rows: d/dq then d/dw
        A[0, 1], A[0, 2], A[0, 3] = 0.5 * w3, -0.5 * w2, 0.5 * w1
        A[1, 0], A[1, 2], A[1, 3] = -0.5 * w3, 0.5 * w1, 0.5 * w2
        A[2, 0], A[2, 1], A[2, 3] = 0.5 * w2, -0.5 * w1, 0.5 * w3
        A[3, 0], A[3, 1], A[3, 2] = -0.5 * w1, -0.5 * w2, -0.5 * w3
        A[0, 4], A[0, 5], A[0, 6] = 0.5 * q4, -0.5 * q3, 0.5 * q2
        A[1, 4], A[1, 5], A[1, 6] = 0.5 * q3, 0.5 * q4, -0.5 * q1
        A[2, 4], A[2, 5], A[2, 6] = -0.5 * q2, 0.5 * q1, 0.5 * q4
        A[3, 4], A[3, 5], A[3, 6] = -0.5 * q1, -0.5 * q2, -0.5 * q3
        A[4, 5], A[4, 6] = -k1 * w3, -k1 * w2
        A[5, 4], A[5, 6] = -k2 * w3, -k2 * w1
        A[6, 4], A[6, 5] = -k3 * w2, -k3 * w1
        B = np.zeros((7, 3) + shape)
        B[4, 0] = 1.0 / p[0]
        B[5, 1] = 1.0 / p[1]
        B[6, 2] = 1.0 / p[2]
        return A, B

    return rhs, jac


def hst_field(gyroscopic="paper"):
    """Rigid-body attitude: scalar-last quaternion kinematics and Euler's equations.

    State ``(q1, q2, q3, q4, w1, w2, w3)``, control torques ``(u1, u2, u3)``,
    parameters the principal moments of inertia.

    ``gyroscopic="paper"`` keeps the third rate equation as
    ``-((p1 - p2) / p3) w1 w2``; ``"rigid_body"`` uses the textbook
    ``-((p2 - p1) / p3) w1 w2``.
    """
    if gyroscopic not in ("paper", "rigid_body"):
        raise ValueError(f"unknown gyroscopic convention {gyroscopic!r}")
    rhs, jac = _make_hst(gyroscopic)
    return TychasticVectorField(
        7, 3, 3, rhs, jac, name="hst",
        state_names=("q1", "q2", "q3", "q4", "w1", "w2", "w3"),
        control_names=("u1", "u2", "u3"))


# ---------------------------------------------------------------------------
# controls and trajectories


@dataclass(frozen=True, eq=False)
class ControlSolution:
    """Control samples on a strictly increasing grid, linearly interpolated.

    ``values`` has one row per grid time. Evaluation outside the grid is
    clamped to the end values.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).copy()
        values = np.asarray(self.values, dtype=float).copy()
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or times.size < 2 or values.shape[0] != times.size:
            raise ValueError("need at least two grid times and one control row per time")
        if np.any(np.diff(times) <= 0):
            raise ValueError("control grid must be strictly increasing")
        times.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def t0(self):
        return float(self.times[0])

    @property
    def tf(self):
        return float(self.times[-1])

    @property
    def n_u(self):
        return self.values.shape[1]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.stack([np.interp(t, self.times, self.values[:, j]) for j in range(self.n_u)])
        return out

    def truncated(self, t_end):
        """Same control re-gridded to end at ``t_end``."""
        keep = self.times < t_end
        times = np.append(self.times[keep], t_end)
        return ControlSolution(times, self(times).T)

    def to_csv(self, path, names=None):
        names = list(names) if names else [f"u{j + 1}" for j in range(self.n_u)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + names)
            for t, row in zip(self.times, self.values):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:])


@dataclass
class Trajectory:
    """Propagation output: states at ``t`` with shape ``(len(t), N_x, ...)``."""

    t: np.ndarray
    x: np.ndarray
    success: np.ndarray
    n_steps: int = 0
    n_rejected: int = 0
    nfev: int = 0

    @property
    def final(self):
        return self.x[-1]


def rk4_step(f, x, u, t, h):
    """One classical fourth-order Runge-Kutta step of ``x' = f(x, u(t), t)``."""
    k1 = f(x, u(t), t)
    k2 = f(x + 0.5 * h * k1, u(t + 0.5 * h), t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, u(t + 0.5 * h), t + 0.5 * h)
    k4 = f(x + h * k3, u(t + h), t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_propagate(f, x0, u, t0, tf, n_steps):
    """Fixed-step RK4; returns the grid and the states (one row per grid time)."""
    ts = np.linspace(t0, tf, n_steps + 1)
    xs = [np.asarray(x0, dtype=float)]
    for k in range(n_steps):
        xs.append(rk4_step(f, xs[-1], u, ts[k], ts[k + 1] - ts[k]))
    return ts, np.stack(xs)


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]
_E = [-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40]
# continuous extension (Shampine), coefficients of theta, theta^2, theta^3, theta^4
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


def _control_callable(control):
    if control is None:
        return None
    return control if callable(control) else (lambda t: np.asarray(control, dtype=float))


def propagate_rk45(field, x0, control, p=None, tol=1e-9, t_span=None, t_eval=None,
                   breakpoints=None, max_steps=200_000, raise_on_failure=True):
    """Adaptive Dormand-Prince 5(4) propagation of one or many trajectories.

    Parameters
    ----------
    field : TychasticVectorField or callable ``(x, u, t, p) -> xdot``
    x0 : array, shape ``(N_x,)`` or ``(N_x, n)``
        Initial state(s); a second axis propagates ``n`` lanes at once.
    control : ControlSolution or callable ``t -> u``
    p : array, shape ``(N_p,)`` or ``(N_p, n)``
    tol : float
        Absolute and relative tolerance of the embedded error estimate.
    t_span : (t0, tf), optional
        Defaults to the control grid end points.
    t_eval : array, optional
        Output times; defaults to the control grid.
    breakpoints : array, optional
        Times that no step may straddle; defaults to the control grid, where
        the interpolated control has kinks.

    Every lane runs its own step-size controller, so a lane's result does not
    depend on which other lanes are propagated alongside it.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    is_grid = isinstance(control, ControlSolution)
    ufun = _control_callable(control)
    if t_span is None:
        if not is_grid:
            raise ValueError("t_span is required when control has no grid")
        t_span = (control.t0, control.tf)
    t0, tf = float(t_span[0]), float(t_span[1])
    if not tf > t0:
        raise ValueError("t_span must be increasing")
    if t_eval is None:
        t_eval = control.times if is_grid else np.array([t0, tf])
    t_eval = np.clip(np.asarray(t_eval, dtype=float), t0, tf)
    if breakpoints is None and is_grid:
        breakpoints = control.times
    knots = np.asarray([] if breakpoints is None else breakpoints, dtype=float)
    knots = np.unique(np.append(knots[(knots > t0) & (knots < tf)], tf))

    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    y = (x0[:, None] if single else x0).copy()
    n_x, n = y.shape
    if p is None:
        p = getattr(field, "nominal", None)
    if p is None:
        pp = None
    else:
        pp = np.asarray(p, dtype=float)
        pp = np.broadcast_to(pp[:, None] if pp.ndim == 1 else pp, (pp.shape[0], n))

    def f(yy, tt, lanes):
        uu = ufun(tt) if ufun is not None else None
        return field(yy, uu, tt, None if pp is None else pp[:, lanes])

    span = tf - t0
    h_min = 1e-14 * span
    t = np.full(n, t0)
    all_lanes = np.arange(n)
    k1 = f(y, t, all_lanes)
    nfev = 1
    scale = tol * (1.0 + np.abs(y))
    d0 = np.max(np.abs(y) / scale, axis=0)
    d1 = np.max(np.abs(k1) / scale, axis=0)
    h = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6 * span, 0.01 * d0 / np.maximum(d1, 1e-300))
    h = np.minimum(h, 0.1 * span)
    out = np.full((t_eval.size, n_x, n), np.nan)
    ptr = np.zeros(n, dtype=int)
    at_start = t_eval <= t0
    out[at_start] = y
    ptr[:] = int(at_start.sum())
    active = np.ones(n, dtype=bool)
    success = np.ones(n, dtype=bool)
    n_steps = n_rej = 0

    while active.any():
        lanes = np.flatnonzero(active)
        tl, yl, hl = t[lanes], y[:, lanes], h[lanes]
        stop = knots[np.minimum(np.searchsorted(knots, tl, side="right"), knots.size - 1)]
        hl = np.minimum(hl, stop - tl)
        # floating-point guard: land exactly on the stop time
        hit = tl + hl >= stop - 1e-12 * span
        K = [k1[:, lanes]]
        for s in range(1, 6):
            ys = yl + hl * sum(a * K[j] for j, a in enumerate(_A[s]) if a != 0.0)
            K.append(f(ys, tl + _C[s] * hl, lanes))
        y_new = yl + hl * sum(b * K[j] for j, b in enumerate(_B) if b != 0.0)
        t_new = np.where(hit, stop, tl + hl)
        K.append(f(y_new, t_new, lanes))
        nfev += 6
        err = hl * sum(e * K[j] for j, e in enumerate(_E) if e != 0.0)
        sc = tol * (1.0 + np.maximum(np.abs(yl), np.abs(y_new)))
        err_norm = np.max(np.abs(err) / sc, axis=0)
        ok = err_norm <= 1.0
        n_steps += int(ok.sum())
        n_rej += int((~ok).sum())
        with np.errstate(divide="ignore"):
            factor = np.where(err_norm == 0, 5.0, 0.9 * err_norm ** -0.2)
        factor = np.clip(factor, 0.2, 5.0)
        factor = np.where(ok, factor, np.minimum(factor, 1.0))
        h_next = hl * factor

        acc = lanes[ok]
        if acc.size:
            # dense output for requested times inside the accepted steps
            Kacc = np.stack([k[:, ok] for k in K])  # (7, n_x, n_acc)
            y_old, h_acc, t_old, t_end = yl[:, ok], hl[ok], tl[ok], t_new[ok]
            while True:
                pa = ptr[acc]
                valid = pa < t_eval.size
                te = t_eval[np.minimum(pa, t_eval.size - 1)]
                need = valid & (te <= t_end + 1e-12 * span)
                if not need.any():
                    break
                idx = np.flatnonzero(need)
                theta = np.clip((te[idx] - t_old[idx]) / h_acc[idx], 0.0, 1.0)
                powers = np.stack([theta, theta ** 2, theta ** 3, theta ** 4])
                coef = _P @ powers  # (7, m)
                incr = np.einsum("sm,sim->im", coef, Kacc[:, :, idx])
                vals = y_old[:, idx] + h_acc[idx] * incr
                exact = te[idx] >= t_end[idx] - 1e-12 * span
                vals[:, exact] = y_new[:, ok][:, idx[exact]]
                out[pa[idx], :, acc[idx]] = vals.T
                ptr[acc[idx]] += 1
            t[acc] = t_new[ok]
            y[:, acc] = y_new[:, ok]
            k1[:, acc] = K[6][:, ok]
            done = t[acc] >= tf - 1e-12 * span
            active[acc[done]] = False
        h[lanes] = h_next
        too_small = active[lanes] & (h_next < h_min) & ~ok
        if too_small.any():
            bad = lanes[too_small]
            if raise_on_failure:
                raise StepUnderflow(
                    f"step size underflow near t={t[bad[0]]:.6g} on lane {int(bad[0])}")
            success[bad] = False
            active[bad] = False
        if n_steps + n_rej > max_steps * max(1, n):
            bad = np.flatnonzero(active)
            if raise_on_failure:
                raise StepUnderflow("maximum number of steps exceeded")
            success[bad] = False
            active[bad] = False

    if single:
        out = out[:, :, 0]
    return Trajectory(t_eval.copy(), out, success if not single else success[:1],
                      n_steps, n_rej, nfev)


# ---------------------------------------------------------------------------
# stochastic reference integrator


@dataclass(frozen=True, eq=False)
class SDEModel:
    """Ito SDE ``dx = drift(x, u, t) dt + diffusion(x, u, t) dW``.

    ``diffusion`` returns shape ``(N_x, N_w, ...)``.
    """

    drift: Callable
    diffusion: Callable
    n_x: int
    n_w: int


@dataclass
class SDEPath:
    t: np.ndarray
    x: np.ndarray


def euler_maruyama(model, x0, control, t_f, h, seed=0, n_paths=None, t0=0.0,
                   increments=None):
    """Euler-Maruyama: ``x+ = x + f h + sigma W_h sqrt(h)`` with ``W_h ~ N(0, I)``.

    ``increments`` optionally supplies the standard normal draws, shape
    ``(n_steps, N_w)`` or ``(n_steps, N_w, n_paths)``; this is how common
    random numbers are shared between step sizes.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    span = t_f - t0
    n_steps = int(np.ceil(span / h - 1e-9))
    ts = np.minimum(t0 + h * np.arange(n_steps + 1), t_f)
    ts[-1] = t_f
    x = np.asarray(x0, dtype=float)
    batch = () if n_paths is None else (n_paths,)
    x = np.broadcast_to(x.reshape((model.n_x,) + (1,) * len(batch)), (model.n_x,) + batch).copy()
    if increments is None:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
        increments = rng.standard_normal((n_steps, model.n_w) + batch)
    else:
        increments = np.asarray(increments, dtype=float)
        if increments.shape[0] != n_steps:
            raise ValueError(f"need {n_steps} increments, got {increments.shape[0]}")
    ufun = _control_callable(control)
    path = np.empty((n_steps + 1,) + x.shape)
    path[0] = x
    for k in range(n_steps):
        hk = ts[k + 1] - ts[k]
        u = ufun(ts[k]) if ufun is not None else None
        sig = model.diffusion(x, u, ts[k])
        noise = np.einsum("ij...,j...->i...", sig, increments[k])
        x = x + model.drift(x, u, ts[k]) * hk + noise * np.sqrt(hk)
        path[k + 1] = x
    return SDEPath(ts, path)


def explicit_euler(f, x0, control, t_f, h, t0=0.0):
    """Deterministic forward Euler on the same grid as :func:`euler_maruyama`."""
    span = t_f - t0
    n_steps = int(np.ceil(span / h - 1e-9))
    ts = np.minimum(t0 + h * np.arange(n_steps + 1), t_f)
    ts[-1] = t_f
    ufun = _control_callable(control)
    x = np.asarray(x0, dtype=float)
    path = [x]
    for k in range(n_steps):
        u = ufun(ts[k]) if ufun is not None else None
        x = x + f(x, u, ts[k]) * (ts[k + 1] - ts[k])
        path.append(x)
    return SDEPath(ts, np.stack(path))


def write_trajectory_csv(path, t, x, control=None, state_names=None, control_names=None):
    """Dump ``t, x1..xN_x, u1..uN_u`` rows; ``x`` has one row per time."""
    x = np.asarray(x, dtype=float)
    n_x = x.shape[1]
    header = ["t"] + list(state_names or [f"x{i + 1}" for i in range(n_x)])
    u = None
    if control is not None:
        u = np.asarray(control(np.asarray(t)), dtype=float).T
        header += list(control_names or [f"u{j + 1}" for j in range(u.shape[1])])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, tk in enumerate(t):
            row = [repr(float(tk))] + [repr(float(v)) for v in x[k]]
            if u is not None:
                row += [repr(float(v)) for v in u[k]]
            w.writerow(row)
