"""Direct-collocation transcription of ensemble optimal-control problems.

The time axis is normalised, ``t = t0 + s (tf - t0)`` with ``s`` on a uniform
grid over ``[0, 1]``, so a free final time is just one more decision
variable. Decision vector layout (all entries scaled to O(1))::

    [ states  : node-major, then sigma copy, then component ]
    [ controls: node-major, then component                   ]
    [ midpoint controls (Hermite-Simpson only)               ]
    [ tf (free final time only)                              ]
    [ epigraph variable (minimax cost only)                  ]

Constraint rows are ordered defects, endpoint rows, path rows, epigraph rows.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .dynamics import ControlSolution, propagate_rk45
from .errors import InvalidBounds
from .nlp import SolveResult, SolverOptions, solve
from .problem import (
    Average,
    EnsembleProblem,
    MinTime,
    Minimax,
    NonlinearOfMean,
    TraceCovariance,
    deterministic_instance,
    instantiate_unscented,
)
from .uncertainty import sigma_points

__all__ = ["TranscribedNLP", "transcribe", "extract_control", "solve_ocp", "OCPSolution"]

SCHEMES = ("trapezoid", "hermite_simpson")


def _fd_h(v):
    return 1e-6 * (1.0 + np.abs(v))


def _ranges(sizes):
    out, start = {}, 0
    for name, size in sizes:
        out[name] = slice(start, start + size)
        start += size
    return out, start


class TranscribedNLP:
    """Sparse NLP obtained from an :class:`EnsembleProblem` by collocation.

    Exposes the interface consumed by :func:`tychopt.nlp.solve`: ``x0``,
    ``lb``, ``ub``, ``cl``, ``cu``, ``objective``, ``objective_gradient``,
    ``constraints`` and ``jacobian`` (a ``scipy.sparse`` CSR matrix).
    """

    def __init__(self, ensemble, nodes=50, scheme="hermite_simpson", warm_start=None,
                 tf_guess=None):
        if nodes < 5:
            raise ValueError("at least 5 collocation nodes are required")
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
        self.ensemble = ensemble
        self.problem = prob = ensemble.problem
        self.field = prob.field
        self.scheme = scheme
        self.N = nodes
        self.s = np.linspace(0.0, 1.0, nodes)
        self.ds = 1.0 / (nodes - 1)
        self.n_s = ensemble.n_sigma
        self.n_x = ensemble.n_x
        self.n_u = ensemble.n_u
        self.unit_circle = prob.control.unit_circle
        self.m = 1 if self.unit_circle else self.n_u
        self.free_tf = prob.final_time.free
        self.minimax = isinstance(prob.cost, Minimax)
        self.w = np.asarray(ensemble.weights, dtype=float)
        self.P = np.asarray(ensemble.params, dtype=float)
        self.t0 = float(prob.t0)
        hs = scheme == "hermite_simpson"
        self.hs = hs

        sizes = [("X", nodes * self.n_s * self.n_x), ("U", nodes * self.m)]
        if hs:
            sizes.append(("Um", (nodes - 1) * self.m))
        if self.free_tf:
            sizes.append(("T", 1))
        if self.minimax:
            sizes.append(("Z", 1))
        self.layout, self.n = _ranges(sizes)

        # endpoint rows
        self._ep_rows = []
        start = 0
        for c in prob.endpoint:
            size = c.size * (self.n_s if c.mode == "each" else 1)
            self._ep_rows.append(slice(start, start + size))
            start += size
        self.n_ep = start
        self._path_rows = []
        start = 0
        for c in prob.path:
            size = c.size * nodes * (self.n_s if c.mode == "each" else 1)
            self._path_rows.append(slice(start, start + size))
            start += size
        self.n_path = start
        self.n_def = (nodes - 1) * self.n_s * self.n_x
        self.n_mm = self.n_s if self.minimax else 0
        self.rows, self.m_con = _ranges([
            ("defects", self.n_def), ("endpoint", self.n_ep), ("path", self.n_path),
            ("epigraph", self.n_mm)])
        e0, p0 = self.rows["endpoint"].start, self.rows["path"].start
        self._ep_rows = [slice(sl.start + e0, sl.stop + e0) for sl in self._ep_rows]
        self._path_rows = [slice(sl.start + p0, sl.stop + p0) for sl in self._path_rows]

        guess = self._initial_guess(warm_start, tf_guess)
        self._set_scaling(guess)
        self._set_bounds(guess)
        self.x0 = self.pack(**guess)
        self._build_pattern()
        self._cache_key = None
        self._cache = None
        self._scale_rows()

    # -- layout helpers -------------------------------------------------

    def controls_from_params(self, U):
        """Physical controls and ``du/dU`` for parameters ``U`` of shape ``(m, K)``."""
        if self.unit_circle:
            th = U[0]
            u = np.stack([np.cos(th), np.sin(th)])
            du = np.stack([-np.sin(th), np.cos(th)])[:, None, :]
            return u, du
        return U, None

    def params_from_controls(self, u):
        if self.unit_circle:
            return np.unwrap(np.arctan2(u[1], u[0]))[None, :]
        return np.asarray(u, dtype=float)

    def unpack(self, z):
        """Physical pieces of a scaled decision vector."""
        z = np.asarray(z, dtype=float) * self.var_scale
        L = self.layout
        X = z[L["X"]].reshape(self.N, self.n_s, self.n_x).transpose(2, 1, 0)
        U = z[L["U"]].reshape(self.N, self.m).T
        out = dict(X=X, U=U)
        out["Um"] = z[L["Um"]].reshape(self.N - 1, self.m).T if self.hs else None
        out["T"] = float(z[L["T"]][0]) if self.free_tf else float(
            self.problem.final_time.fixed) - self.t0
        out["Z"] = float(z[L["Z"]][0]) if self.minimax else None
        return out

    def pack(self, X, U, Um=None, T=None, Z=None):
        z = np.empty(self.n)
        L = self.layout
        z[L["X"]] = np.asarray(X).transpose(2, 1, 0).ravel()
        z[L["U"]] = np.asarray(U).T.ravel()
        if self.hs:
            z[L["Um"]] = np.asarray(Um).T.ravel()
        if self.free_tf:
            z[L["T"]] = T
        if self.minimax:
            z[L["Z"]] = Z
        if hasattr(self, "var_scale"):
            z = z / self.var_scale
        return z

    # -- initial guess, scaling, bounds -----------------------------------

    def _initial_guess(self, warm_start, tf_guess):
        prob = self.problem
        ft = prob.final_time
        T = (ft.fixed if not ft.free else (tf_guess or ft.guess)) - self.t0
        x0 = self.ensemble.x0
        x0f = np.where(np.isnan(x0), 0.0, x0)
        if warm_start is not None:
            control = warm_start
            if ft.free and tf_guess is None:
                T = control.tf - self.t0
            t_nodes = self.t0 + self.s * T
            t_mid = t_nodes[:-1] + 0.5 * self.ds * T
            stretch = lambda t: control.t0 + (t - self.t0) * (control.tf - control.t0) / T
            ctrl = ControlSolution(control.times, control.values)
            u = ctrl(stretch(t_nodes))
            um = ctrl(stretch(t_mid))
            scaled = ControlSolution(self.t0 + (control.times - control.t0) * T
                                     / (control.tf - control.t0), control.values)
            tr = propagate_rk45(self.field, x0f, scaled, self.P, tol=1e-10, t_eval=t_nodes,
                                raise_on_failure=False)
            X = tr.x.transpose(1, 2, 0)
            if not np.all(np.isfinite(X)):
                X = np.where(np.isfinite(X), X, x0f[:, :, None])
            U = self.params_from_controls(u)
            if self.unit_circle:
                Um = self.params_from_controls(um)
                # keep midpoint angles on the same branch as their neighbours
                ref = 0.5 * (U[0, :-1] + U[0, 1:])
                Um = Um + 2 * np.pi * np.round((ref - Um) / (2 * np.pi))
            else:
                Um = um
        else:
            target = prob.guess.target
            if target is None:
                X = np.repeat(x0f[:, :, None], self.N, axis=2)
            else:
                target = np.asarray(target, dtype=float)[:, None, None]
                X = x0f[:, :, None] + (target - x0f[:, :, None]) * self.s
            if prob.guess.control is not None:
                u = np.repeat(np.asarray(prob.guess.control, dtype=float)[:, None], self.N, axis=1)
            else:
                lo = prob.control.lower
                hi = prob.control.upper
                if lo is not None and hi is not None:
                    mid = 0.5 * (np.asarray(lo) + np.asarray(hi))
                else:
                    mid = np.zeros(self.n_u)
                    if self.unit_circle:
                        mid = np.array([1.0, 0.0])
                u = np.repeat(mid[:, None], self.N, axis=1)
            U = self.params_from_controls(u)
            Um = 0.5 * (U[:, :-1] + U[:, 1:])
        guess = dict(X=X, U=U, Um=Um if self.hs else None, T=T, Z=None)
        if self.minimax:
            tf = self.t0 + T
            XF = X[:, :, -1]
            E = self.problem.cost.endpoint(XF, tf, self.P)
            guess["Z"] = float(np.max(E))
        return guess

    def _set_scaling(self, guess):
        prob = self.problem
        if prob.state_scale is not None:
            xs = np.asarray(prob.state_scale, dtype=float)
        else:
            xs = np.max(np.abs(guess["X"]), axis=(1, 2))
            xs = np.where(xs > 0, xs, 1.0)
        if self.unit_circle:
            us = np.ones(1)
        elif prob.control_scale is not None:
            us = np.asarray(prob.control_scale, dtype=float)
        else:
            lo, hi = prob.control.lower, prob.control.upper
            if lo is not None and hi is not None:
                us = np.maximum(np.abs(np.asarray(lo)), np.abs(np.asarray(hi)))
                us = np.where(np.isfinite(us) & (us > 0), us, 1.0)
            else:
                us = np.ones(self.n_u)
        self.x_scale, self.u_scale = xs, us
        parts = [np.tile(xs, self.N * self.n_s), np.tile(us, self.N)]
        if self.hs:
            parts.append(np.tile(us, self.N - 1))
        if self.free_tf:
            parts.append([max(guess["T"], 1e-8)])
        if self.minimax:
            parts.append([max(abs(guess["Z"]), 1.0)])
        self.var_scale = np.concatenate([np.asarray(p, dtype=float) for p in parts])
        self.obj_scale = float(prob.objective_scale)

    def _set_bounds(self, guess):
        prob = self.problem
        lb = np.full(self.n, -np.inf)
        ub = np.full(self.n, np.inf)
        L = self.layout
        x0 = self.ensemble.x0
        Xl = np.full((self.n_x, self.n_s, self.N), -np.inf)
        Xu = np.full((self.n_x, self.n_s, self.N), np.inf)
        sb = prob.options.get("state_bounds")
        if sb is not None:
            Xl[:] = np.asarray(sb[0], dtype=float)[:, None, None]
            Xu[:] = np.asarray(sb[1], dtype=float)[:, None, None]
        fixed = ~np.isnan(x0)
        Xl[:, :, 0] = np.where(fixed, x0, Xl[:, :, 0])
        Xu[:, :, 0] = np.where(fixed, x0, Xu[:, :, 0])
        lb[L["X"]] = Xl.transpose(2, 1, 0).ravel()
        ub[L["X"]] = Xu.transpose(2, 1, 0).ravel()
        if not self.unit_circle:
            lo, hi = prob.control.lower, prob.control.upper
            if lo is not None:
                lb[L["U"]] = np.tile(np.asarray(lo, dtype=float), self.N)
                if self.hs:
                    lb[L["Um"]] = np.tile(np.asarray(lo, dtype=float), self.N - 1)
            if hi is not None:
                ub[L["U"]] = np.tile(np.asarray(hi, dtype=float), self.N)
                if self.hs:
                    ub[L["Um"]] = np.tile(np.asarray(hi, dtype=float), self.N - 1)
        if self.free_tf:
            ft = prob.final_time
            if not ft.lower < ft.upper:
                raise InvalidBounds("final-time floor must be below the ceiling")
            lb[L["T"]] = ft.lower - self.t0
            ub[L["T"]] = ft.upper - self.t0
        self.lb = lb / self.var_scale
        self.ub = ub / self.var_scale
        # clip guess inside bounds
        guess["X"] = np.clip(guess["X"], Xl, Xu)

    def _scale_rows(self):
        rs = np.ones(self.m_con)
        rs[self.rows["defects"]] = np.tile(self.x_scale, (self.N - 1) * self.n_s)
        for c, sl in zip(self.problem.endpoint, self._ep_rows):
            if c.scale is not None:
                sc = np.asarray(c.scale, dtype=float)
            elif c.mode == "variance":
                sc = np.where(np.isfinite(c.upper) & (c.upper > 0), c.upper, 1.0)
            else:
                sc = np.ones(c.size)
            rs[sl] = np.tile(sc, sl.stop - sl.start)[: sl.stop - sl.start] if c.mode != "each" \
                else np.tile(sc, self.n_s)
        self.row_scale = rs
        cl = np.full(self.m_con, -np.inf)
        cu = np.full(self.m_con, np.inf)
        cl[self.rows["defects"]] = 0.0
        cu[self.rows["defects"]] = 0.0
        for c, sl in zip(self.problem.endpoint, self._ep_rows):
            reps = self.n_s if c.mode == "each" else 1
            lo, hi = np.tile(c.lower, reps), np.tile(c.upper, reps)
            if c.mode == "variance":
                lo = np.where(lo <= 0, -np.inf, lo)
            cl[sl], cu[sl] = lo, hi
        for c, sl in zip(self.problem.path, self._path_rows):
            reps = self.N * (self.n_s if c.mode == "each" else 1)
            cl[sl], cu[sl] = np.tile(c.lower, reps), np.tile(c.upper, reps)
        cu[self.rows["epigraph"]] = 0.0
        self.cl = cl / rs
        self.cu = cu / rs

    # -- sparsity ---------------------------------------------------------

    def _ix(self, k, i, j):
        return (k * self.n_s + i) * self.n_x + j

    def _build_pattern(self):
        N, n_s, n_x, m = self.N, self.n_s, self.n_x, self.m
        L = self.layout
        K = np.arange(N - 1)[:, None, None, None]
        I = np.arange(n_s)[None, :, None, None]
        R = np.arange(n_x)[None, None, :, None]
        Cx = np.arange(n_x)[None, None, None, :]
        Cu = np.arange(m)[None, None, None, :]
        shape_x = (N - 1, n_s, n_x, n_x)
        shape_u = (N - 1, n_s, n_x, m)
        rows_x = np.broadcast_to(self._ix(K, I, R), shape_x)
        rows_u = np.broadcast_to(self._ix(K, I, R), shape_u)
        rr, cc = [], []
        rr += [rows_x, rows_x]
        cc += [np.broadcast_to(self._ix(K, I, Cx), shape_x),
               np.broadcast_to(self._ix(K + 1, I, Cx), shape_x)]
        rr += [rows_u, rows_u]
        cc += [np.broadcast_to(L["U"].start + K * m + Cu, shape_u),
               np.broadcast_to(L["U"].start + (K + 1) * m + Cu, shape_u)]
        if self.hs:
            rr.append(rows_u)
            cc.append(np.broadcast_to(L["Um"].start + K * m + Cu, shape_u))
        if self.free_tf:
            r = self._ix(np.arange(N - 1)[:, None, None], np.arange(n_s)[None, :, None],
                         np.arange(n_x)[None, None, :])
            rr.append(r)
            cc.append(np.full(r.shape, L["T"].start))
        # endpoint rows: dense in final-node states, tf and the epigraph variable
        xf_cols = self._ix(N - 1, np.arange(n_s)[:, None], np.arange(n_x)[None, :]).ravel()
        self._ep_cols = xf_cols if not self.free_tf else np.append(xf_cols, L["T"].start)
        r0 = self.rows["endpoint"].start
        if self.n_ep:
            er = np.repeat(np.arange(r0, r0 + self.n_ep), self._ep_cols.size)
            ec = np.tile(self._ep_cols, self.n_ep)
            rr.append(er)
            cc.append(ec)
        # path rows
        self._path_pattern = []
        for c, sl in zip(self.problem.path, self._path_rows):
            pr, pc = self._path_structure(c, sl)
            rr.append(pr)
            cc.append(pc)
        if self.minimax:
            r0 = self.rows["epigraph"].start
            er = np.repeat(np.arange(r0, r0 + self.n_s), self._ep_cols.size)
            ec = np.tile(self._ep_cols, self.n_s)
            rr += [er, np.arange(r0, r0 + self.n_s)]
            cc += [ec, np.full(self.n_s, L["Z"].start)]
        rows = np.concatenate([np.ravel(a) for a in rr]).astype(np.int64)
        cols = np.concatenate([np.ravel(a) for a in cc]).astype(np.int64)
        key = np.arange(1, rows.size + 1, dtype=float)
        M = sparse.coo_matrix((key, (rows, cols)), shape=(self.m_con, self.n)).tocsr()
        if M.nnz != rows.size:
            raise RuntimeError("duplicate entries in the Jacobian pattern")
        self._perm = M.data.astype(np.int64) - 1
        self._indices = M.indices.copy()
        self._indptr = M.indptr.copy()
        self._pattern = (rows, cols)

    def _path_structure(self, c, sl):
        N, n_s, n_x, m = self.N, self.n_s, self.n_x, self.m
        L = self.layout
        nh = c.size
        k = np.arange(N)
        tail = [L["T"].start] if self.free_tf else []
        if c.mode == "each":
            # rows ordered (node, copy, row)
            rows, cols = [], []
            for kk in range(N):
                for i in range(n_s):
                    base = sl.start + (kk * n_s + i) * nh
                    vcols = np.concatenate([self._ix(kk, i, np.arange(n_x)),
                                            L["U"].start + kk * m + np.arange(m), tail])
                    rows.append(np.repeat(base + np.arange(nh), vcols.size))
                    cols.append(np.tile(vcols, nh))
        else:
            rows, cols = [], []
            for kk in range(N):
                base = sl.start + kk * nh
                vcols = np.concatenate([self._ix(kk, np.arange(n_s)[:, None],
                                                 np.arange(n_x)[None, :]).ravel(),
                                        L["U"].start + kk * m + np.arange(m), tail])
                rows.append(np.repeat(base + np.arange(nh), vcols.size))
                cols.append(np.tile(vcols, nh))
        del k
        return np.concatenate(rows), np.concatenate(cols).astype(np.int64)

    def jacobian_structure(self):
        """Row and column indices of the structurally non-zero Jacobian entries."""
        return self._pattern

    # -- evaluation -------------------------------------------------------

    def _node_fun_fd(self, fun, X, u, t, p, du):
        """Value and derivatives of a node-wise function ``fun(x, u, t, p)``.

        Returns value ``(n_g, n_s, K)``, ``d/dx`` ``(n_g, n_x, n_s, K)``,
        ``d/dU`` ``(n_g, m, n_s, K)`` and ``d/dt`` ``(n_g, n_s, K)``.
        """
        ub = u[:, None, :]
        shape = X.shape[1:]

        def ev(x_, u_, t_):
            v = np.asarray(fun(x_, u_, t_[None, :], p), dtype=float)
            lead = v.shape[:max(v.ndim - len(shape), 0)]
            return np.broadcast_to(v, lead + shape).reshape((-1,) + shape)

        base = ev(X, ub, t)
        ng = base.shape[0]
        gx = np.empty((ng, self.n_x) + shape)
        for j in range(self.n_x):
            h = _fd_h(X[j])
            Xp, Xm = X.copy(), X.copy()
            Xp[j] += h
            Xm[j] -= h
            gx[:, j] = (ev(Xp, ub, t) - ev(Xm, ub, t)) / (2 * h)
        gu_phys = np.empty((ng, self.n_u) + shape)
        for j in range(self.n_u):
            h = _fd_h(u[j])
            up, um = u.copy(), u.copy()
            up[j] += h
            um[j] -= h
            gu_phys[:, j] = (ev(X, up[:, None, :], t) - ev(X, um[:, None, :], t)) / (2 * h)[None, :]
        if du is not None:
            gu = np.einsum("gjik,jck->gcik", gu_phys, du)
        else:
            gu = gu_phys
        h = _fd_h(t)
        gt = (ev(X, ub, t + h) - ev(X, ub, t - h)) / (2 * h)
        return base, gx, gu, gt

    def _endpoint_eval(self, XF, T, Z):
        """All endpoint-dependent quantities for a batch of ``(XF, T)``.

        ``XF`` has shape ``(n_x, n_s, B)``, ``T`` shape ``(B,)``. Returns the
        endpoint constraint rows ``(n_ep, B)``, the terminal objective
        ``(B,)`` and the minimax rows ``(n_s, B)`` (without the epigraph
        variable).
        """
        prob = self.problem
        p = self.P[:, :, None]
        w = self.w[:, None]
        tf = (self.t0 + T)[None, :]
        rows = []
        for c in prob.endpoint:
            e = np.asarray(c.fun(XF, tf, p), dtype=float).reshape(c.size, self.n_s, -1)
            if c.mode == "each":
                rows.append(e.transpose(1, 0, 2).reshape(self.n_s * c.size, -1))
            else:
                mean = np.einsum("i,ris->rs", self.w, e)
                if c.mode == "mean":
                    rows.append(mean)
                else:
                    d = e - mean[:, None, :]
                    rows.append(np.einsum("i,ris->rs", self.w, d * d))
        ep = np.concatenate(rows, axis=0) if rows else np.zeros((0, XF.shape[-1]))
        cost = prob.cost
        term = np.zeros(XF.shape[-1])
        mm = np.zeros((0, XF.shape[-1]))
        if isinstance(cost, MinTime):
            term = T.copy()
        elif isinstance(cost, Average) and cost.terminal is not None:
            phi = np.asarray(cost.terminal(XF, tf, p), dtype=float).reshape(self.n_s, -1)
            term = (w * phi).sum(axis=0)
        elif isinstance(cost, TraceCovariance):
            g = np.asarray(cost.values(XF), dtype=float)
            g = g.reshape(-1, self.n_s, XF.shape[-1])
            mean = np.einsum("i,ris->rs", self.w, g)
            d = g - mean[:, None, :]
            term = np.einsum("i,ris->s", self.w, d * d)
        elif isinstance(cost, NonlinearOfMean):
            x0 = self.ensemble.x0
            mean_x0 = np.where(np.isnan(x0), 0.0, x0) @ self.w
            mean_xf = np.einsum("i,jis->js", self.w, XF)
            term = np.asarray(cost.fun(mean_x0[:, None], mean_xf, self.t0, tf[0],
                                       (self.P @ self.w)[:, None]), dtype=float).reshape(-1)
        elif isinstance(cost, Minimax):
            mm = np.asarray(cost.endpoint(XF, tf, p), dtype=float).reshape(self.n_s, -1)
        return ep, term, mm

    def evaluate(self, z):
        """Objective, gradient, constraints and Jacobian at ``z`` (cached)."""
        key = np.asarray(z, dtype=float).tobytes()
        if key == self._cache_key:
            return self._cache
        V = self.unpack(z)
        X, U, Um, T = V["X"], V["U"], V["Um"], V["T"]
        N, n_s, n_x, m = self.N, self.n_s, self.n_x, self.m
        prob = self.problem
        fld = self.field
        s, ds = self.s, self.ds
        h = ds * T
        tk = self.t0 + s * T
        u, du = self.controls_from_params(U)
        p3 = self.P[:, :, None]
        ub = u[:, None, :]
        F = fld(X, ub, tk[None, :], p3)
        A, B = fld.jacobians(X, ub, tk[None, :], p3)
        A = np.broadcast_to(A, (n_x, n_x, n_s, N))
        B = np.broadcast_to(B, (n_x, self.n_u, n_s, N))
        Ft = fld.time_derivative(X, ub, tk[None, :], p3)
        At = np.ascontiguousarray(A.transpose(3, 2, 0, 1))  # (N, n_s, n_x, n_x)
        Bt = np.ascontiguousarray(B.transpose(3, 2, 0, 1))  # (N, n_s, n_x, n_u)
        if du is not None:
            Bt = np.einsum("kirc,ck->kir", Bt, du[:, 0, :])[..., None]
        Fk = F.transpose(2, 1, 0)  # (N, n_s, n_x)
        Ftk = Ft.transpose(2, 1, 0) * s[:, None, None]  # dF/dT through t_k
        eye = np.eye(n_x)
        data = []
        if not self.hs:
            d = X[:, :, 1:] - X[:, :, :-1] - 0.5 * h * (F[:, :, :-1] + F[:, :, 1:])
            D = -eye - 0.5 * h * At[:-1]
            E = eye - 0.5 * h * At[1:]
            Uk = -0.5 * h * Bt[:-1]
            Uk1 = -0.5 * h * Bt[1:]
            data += [D, E, Uk, Uk1]
            if self.free_tf:
                dT = -0.5 * ds * (Fk[:-1] + Fk[1:]) - 0.5 * h * (Ftk[:-1] + Ftk[1:])
                data.append(dT)
        else:
            tm = tk[:-1] + 0.5 * h
            sm = s[:-1] + 0.5 * ds
            um, dum = self.controls_from_params(Um)
            Xm = 0.5 * (X[:, :, :-1] + X[:, :, 1:]) + (h / 8.0) * (F[:, :, :-1] - F[:, :, 1:])
            umb = um[:, None, :]
            Fm = fld(Xm, umb, tm[None, :], p3)
            Am, Bm = fld.jacobians(Xm, umb, tm[None, :], p3)
            Am = np.broadcast_to(Am, (n_x, n_x, n_s, N - 1))
            Bm = np.broadcast_to(Bm, (n_x, self.n_u, n_s, N - 1))
            Ftm = fld.time_derivative(Xm, umb, tm[None, :], p3).transpose(2, 1, 0) \
                * sm[:, None, None]
            Amt = np.ascontiguousarray(Am.transpose(3, 2, 0, 1))
            Bmt = np.ascontiguousarray(Bm.transpose(3, 2, 0, 1))
            if dum is not None:
                Bmt = np.einsum("kirc,ck->kir", Bmt, dum[:, 0, :])[..., None]
            d = X[:, :, 1:] - X[:, :, :-1] - (h / 6.0) * (F[:, :, :-1] + 4.0 * Fm + F[:, :, 1:])
            AmAk = Amt @ At[:-1]
            AmAk1 = Amt @ At[1:]
            c1 = 2.0 * h / 3.0
            D = -eye - (h / 6.0) * At[:-1] - c1 * (0.5 * Amt + (h / 8.0) * AmAk)
            E = eye - (h / 6.0) * At[1:] - c1 * (0.5 * Amt - (h / 8.0) * AmAk1)
            Uk = -(h / 6.0) * Bt[:-1] - c1 * (h / 8.0) * (Amt @ Bt[:-1])
            Uk1 = -(h / 6.0) * Bt[1:] + c1 * (h / 8.0) * (Amt @ Bt[1:])
            Umb = -c1 * Bmt
            data += [D, E, Uk, Uk1, Umb]
            if self.free_tf:
                Fmk = Fm.transpose(2, 1, 0)
                dXm = (ds / 8.0) * (Fk[:-1] - Fk[1:]) + (h / 8.0) * (Ftk[:-1] - Ftk[1:])
                dFm = np.einsum("kirc,kic->kir", Amt, dXm) + Ftm
                dT = -(ds / 6.0) * (Fk[:-1] + 4.0 * Fmk + Fk[1:]) \
                    - (h / 6.0) * (Ftk[:-1] + 4.0 * dFm + Ftk[1:])
                data.append(dT)
        defects = d.transpose(2, 1, 0).ravel()

        # objective pieces
        grad = np.zeros(self.n)
        gX = np.zeros((N, n_s, n_x))
        gU = np.zeros((N, m))
        gUm = np.zeros((N - 1, m)) if self.hs else None
        gT = 0.0
        J = 0.0
        cost = prob.cost
        if isinstance(cost, Average) and cost.running is not None:
            Jr, gXr, gUr, gUmr, gTr = self._running_cost(
                cost.running, X, u, du, tk, T, F, At, Bt, Fk, Ftk,
                (Xm, um, dum, tm, sm, Amt, Bmt, Fm) if self.hs else None)
            J += Jr
            gX += gXr
            gU += gUr
            if self.hs:
                gUm += gUmr
            gT += gTr

        # endpoint block by central differences over (final states, tf)
        XF = X[:, :, -1]
        nv = n_x * n_s + (1 if self.free_tf else 0)
        hx = _fd_h(XF).T.ravel()  # ordered (copy, component)
        hT = _fd_h(np.array([T]))
        steps = np.concatenate([hx, hT]) if self.free_tf else hx
        Bsz = 1 + 2 * nv
        XFb = np.repeat(XF[:, :, None], Bsz, axis=2)
        Tb = np.full(Bsz, T)
        for v in range(n_x * n_s):
            i, j = divmod(v, n_x)
            XFb[j, i, 1 + 2 * v] += steps[v]
            XFb[j, i, 2 + 2 * v] -= steps[v]
        if self.free_tf:
            Tb[-2] += steps[-1]
            Tb[-1] -= steps[-1]
        ep, term, mm = self._endpoint_eval(XFb, Tb, V["Z"])
        dep = (ep[:, 1::2] - ep[:, 2::2]) / (2 * steps)
        dterm = (term[1::2] - term[2::2]) / (2 * steps)
        J += term[0]
        if isinstance(cost, Minimax):
            J = V["Z"]
            grad[self.layout["Z"]] = 1.0
        gX[-1] += dterm[: n_x * n_s].reshape(n_s, n_x)
        if self.free_tf:
            gT += dterm[-1]
        grad[self.layout["X"]] += gX.ravel()
        grad[self.layout["U"]] += gU.ravel()
        if self.hs:
            grad[self.layout["Um"]] += gUm.ravel()
        if self.free_tf:
            grad[self.layout["T"]] += gT
        grad = grad * self.var_scale / self.obj_scale

        cons = [defects, ep[:, 0]]
        if self.n_ep:
            data.append(dep)
        # path constraints
        for c in prob.path:
            val, jac_parts = self._path_eval(c, X, u, du, tk, T)
            cons.append(val)
            data.extend(jac_parts)
        if self.minimax:
            cons.append(mm[:, 0] - V["Z"])
            dmm = (mm[:, 1::2] - mm[:, 2::2]) / (2 * steps)
            data += [dmm, -np.ones(n_s)]
        c = np.concatenate(cons)
        vals = np.concatenate([np.ravel(a) for a in data])
        # column and row scaling
        vals = vals * self.var_scale[self._pattern[1]] / self.row_scale[self._pattern[0]]
        Jac = sparse.csr_matrix((vals[self._perm], self._indices, self._indptr),
                                shape=(self.m_con, self.n))
        out = (J / self.obj_scale, grad, c / self.row_scale, Jac)
        self._cache_key, self._cache = key, out
        return out

    def _running_cost(self, L, X, u, du, tk, T, F, At, Bt, Fk, Ftk, mid):
        N = self.N
        p3 = self.P[:, :, None]
        ds, s = self.ds, self.s
        w = self.w
        val, gx, gu, gt = self._node_fun_fd(L, X, u, tk, p3, du)
        val, gx, gu, gt = val[0], gx[0], gu[0], gt[0]  # (n_s, N), (n_x, n_s, N), ...
        if not self.hs:
            q = np.full(N, ds)
            q[0] = q[-1] = 0.5 * ds
            J = T * np.einsum("i,k,ik->", w, q, val)
            gX = (T * w[None, :, None] * q[None, None, :] * gx).transpose(2, 1, 0)
            gU = T * np.einsum("i,k,cik->kc", w, q, gu)
            gT = np.einsum("i,k,ik->", w, q, val) + T * np.einsum("i,k,ik->", w, q * s, gt)
            return J, gX, gU, None, gT
        Xm, um, dum, tm, sm, Amt, Bmt, Fm = mid
        h = ds * T
        vm, gxm, gum, gtm = self._node_fun_fd(L, Xm, um, tm, p3, dum)
        vm, gxm, gum, gtm = vm[0], gxm[0], gum[0], gtm[0]
        # Simpson: sum_k h/6 (L_k + 4 L_m + L_k+1)
        q = np.full(N, 2.0)
        q[0] = q[-1] = 1.0
        q *= h / 6.0
        qm = 4.0 * h / 6.0
        J = np.einsum("i,k,ik->", w, q, val) + qm * np.einsum("i,ik->", w, vm)
        gX = (w[None, :, None] * q[None, None, :] * gx).transpose(2, 1, 0)  # (N, n_s, n_x)
        gU = np.einsum("i,k,cik->kc", w, q, gu)
        gUm = qm * np.einsum("i,cik->kc", w, gum)
        # chain through the midpoint state
        gm = (qm * w[None, :, None] * gxm).transpose(2, 1, 0)  # (N-1, n_s, n_x)
        Ak, Ak1 = At[:-1], At[1:]
        gX[:-1] += 0.5 * gm + (h / 8.0) * np.einsum("kir,kirc->kic", gm, Ak)
        gX[1:] += 0.5 * gm - (h / 8.0) * np.einsum("kir,kirc->kic", gm, Ak1)
        gU[:-1] += (h / 8.0) * np.einsum("kir,kirc->kc", gm, Bt[:-1])
        gU[1:] -= (h / 8.0) * np.einsum("kir,kirc->kc", gm, Bt[1:])
        Jnorm = J / T
        dXm = (ds / 8.0) * (Fk[:-1] - Fk[1:]) + (h / 8.0) * (Ftk[:-1] - Ftk[1:])
        gT = Jnorm + np.einsum("i,k,ik->", w, q * s, gt) + qm * np.einsum("i,k,ik->", w, sm, gtm) \
            + np.einsum("kir,kir->", gm, dXm)
        return J, gX, gU, gUm, gT

    def _path_eval(self, c, X, u, du, tk, T):
        N, n_s = self.N, self.n_s
        p3 = self.P[:, :, None]
        val, gx, gu, gt = self._node_fun_fd(c.fun, X, u, tk, p3, du)
        gtT = gt * self.s[None, None, :]
        nh = c.size
        parts = []
        if c.mode == "each":
            v = val.transpose(2, 1, 0).ravel()  # (node, copy, row)
            for kk in range(N):
                for i in range(n_s):
                    blk = [gx[:, :, i, kk], gu[:, :, i, kk]]
                    if self.free_tf:
                        blk.append(gtT[:, i, kk][:, None])
                    parts.append(np.concatenate(blk, axis=1))
        else:
            v = np.einsum("i,rik->kr", self.w, val).ravel()
            for kk in range(N):
                gxx = (gx[:, :, :, kk] * self.w[None, None, :]).transpose(0, 2, 1).reshape(nh, -1)
                blk = [gxx, np.einsum("i,rci->rc", self.w, gu[:, :, :, kk])]
                if self.free_tf:
                    blk.append(np.einsum("i,ri->r", self.w, gtT[:, :, kk])[:, None])
                parts.append(np.concatenate(blk, axis=1))
        return v, parts

    # -- solver interface ---------------------------------------------------

    def objective(self, z):
        return self.evaluate(z)[0]

    def objective_gradient(self, z):
        return self.evaluate(z)[1]

    def constraints(self, z):
        return self.evaluate(z)[2]

    def jacobian(self, z):
        return self.evaluate(z)[3]

    # -- solution access -------------------------------------------------

    def physical_objective(self, z):
        return self.objective(z) * self.obj_scale

    def final_time(self, z):
        return self.t0 + self.unpack(z)["T"]

    def node_times(self, z):
        return self.t0 + self.s * self.unpack(z)["T"]

    def states(self, z):
        """Node states, shape ``(N, n_x, n_sigma)``."""
        return self.unpack(z)["X"].transpose(2, 0, 1)

    def constraint_groups(self, z):
        c = self.constraints(z) * self.row_scale
        return {name: c[sl] for name, sl in self.rows.items()}

    def dump_json(self, z, path=None):
        """Layout, bounds and unscaled constraint residuals as JSON."""
        c = self.constraints(z)
        viol = np.maximum(np.maximum(self.cl - c, c - self.cu), 0.0) * self.row_scale
        doc = {
            "scheme": self.scheme,
            "nodes": self.N,
            "n_sigma": self.n_s,
            "n_variables": self.n,
            "n_constraints": self.m_con,
            "layout": {k: [v.start, v.stop] for k, v in self.layout.items()},
            "rows": {k: [v.start, v.stop] for k, v in self.rows.items()},
            "bounds": {"lb": _jsonable(self.lb * self.var_scale),
                       "ub": _jsonable(self.ub * self.var_scale)},
            "residuals": {k: _jsonable(viol[sl]) for k, sl in self.rows.items()},
            "max_violation": float(viol.max(initial=0.0)),
            "objective": float(self.physical_objective(z)),
        }
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return doc


def _jsonable(a):
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]


def transcribe(problem, nodes=50, scheme="hermite_simpson", warm_start=None, tf_guess=None):
    """Transcribe an ensemble (or tychastic) problem into a :class:`TranscribedNLP`."""
    if not isinstance(problem, EnsembleProblem):
        problem = deterministic_instance(problem) if problem.deterministic else \
            instantiate_unscented(problem, sigma_points(problem.distribution,
                                                        problem.sigma_scheme, problem.kappa))
    return TranscribedNLP(problem, nodes, scheme, warm_start=warm_start, tf_guess=tf_guess)


def extract_control(nlp, z, include_midpoints=False):
    """Optimised control on the collocation grid in physical time.

    Angle-parameterised controls are mapped back to ``(cos, sin)``.
    """
    V = nlp.unpack(z)
    T = V["T"]
    t = nlp.t0 + nlp.s * T
    u, _ = nlp.controls_from_params(V["U"])
    if include_midpoints and nlp.hs:
        um, _ = nlp.controls_from_params(V["Um"])
        tm = t[:-1] + 0.5 * nlp.ds * T
        t = np.concatenate([t, tm])
        u = np.concatenate([u, um], axis=1)
        order = np.argsort(t)
        t, u = t[order], u[:, order]
    return ControlSolution(t, u.T)


@dataclass
class OCPSolution:
    nlp: TranscribedNLP
    result: SolveResult
    control: ControlSolution

    @property
    def tf(self):
        return self.nlp.final_time(self.result.x)

    @property
    def objective(self):
        return self.nlp.physical_objective(self.result.x)

    @property
    def status(self):
        return self.result.status

    def summary(self):
        r = self.result
        return {
            "problem": self.nlp.problem.name,
            "status": r.status,
            "message": r.message,
            "objective": float(self.objective),
            "tf": float(self.tf),
            "infeasibility": float(r.infeasibility),
            "kkt": float(r.kkt),
            "outer_iterations": len(r.log),
            "inner_iterations": int(r.n_inner),
            "nodes": self.nlp.N,
            "scheme": self.nlp.scheme,
            "n_sigma": self.nlp.n_s,
        }


def solve_ocp(problem, nodes=50, scheme="hermite_simpson", options=None, warm_start=None,
              sigma=None, tf_guess=None):
    """Instantiate, transcribe and solve; returns an :class:`OCPSolution`.

    The returned control includes the Hermite-Simpson midpoint values, so
    re-propagation sees every collocated control sample.

    ``sigma`` overrides the cubature rule; by default deterministic problems
    use the nominal parameter and the others the problem's sigma scheme.
    """
    if isinstance(problem, EnsembleProblem):
        ens = problem
    elif sigma is not None:
        ens = instantiate_unscented(problem, sigma)
    elif problem.deterministic:
        ens = deterministic_instance(problem)
    else:
        ens = instantiate_unscented(problem, sigma_points(problem.distribution,
                                                          problem.sigma_scheme, problem.kappa))
    nlp = TranscribedNLP(ens, nodes, scheme, warm_start=warm_start, tf_guess=tf_guess)
    result = solve(nlp, options or SolverOptions())
    return OCPSolution(nlp, result, extract_control(nlp, result.x, include_midpoints=True))
