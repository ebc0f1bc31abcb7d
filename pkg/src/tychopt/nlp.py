"""Augmented-Lagrangian solver for bound- and range-constrained NLPs.

Problem form::

    minimize    f(x)
    subject to  cl <= c(x) <= cu,   lb <= x <= ub

Rows with ``cl == cu`` are equalities. By default every other row gets a
slack variable, ``c_i(x) - s_i = 0`` with ``cl_i <= s_i <= cu_i``, so the
augmented Lagrangian stays twice differentiable; with ``slacks=False`` the
inequalities become squared hinge terms instead. Each outer iteration
minimises the augmented Lagrangian over the box, then updates the
multipliers. Two inner methods are available:

``"lbfgsb"``
    scipy's L-BFGS-B on the augmented Lagrangian.
``"structured"``
    projected quasi-Newton steps with the model ``B + rho J_a^T J_a``, where
    ``B`` is a damped BFGS approximation of the Lagrangian Hessian and
    ``J_a`` the Jacobian rows of equalities and active inequalities. The
    penalty curvature is exact, which is what L-BFGS-B misses at large
    ``rho``. Up to ``dense_limit`` variables ``B`` is a dense matrix; above
    it ``B`` is kept in limited-memory compact form and the step uses a
    sparse factorisation.

``"auto"`` picks the structured method for constrained problems.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, sparse
from scipy.sparse.linalg import splu

from .errors import NonFiniteEvaluation

__all__ = ["NLP", "SolverOptions", "SolveResult", "solve", "gradient", "fd_jacobian"]


def _fd_steps(x, rel):
    return rel * (1.0 + np.abs(x))


def gradient(problem, x, method="auto", rel_step=1e-6):
    """Objective gradient at ``x``.

    ``problem`` is either a scalar callable or an object with ``objective``
    (and optionally ``objective_gradient``). ``method="auto"`` uses the
    analytic gradient when one is registered, otherwise central differences
    with step ``rel_step * (1 + |x_i|)``.
    """
    x = np.asarray(x, dtype=float)
    fun = problem if callable(problem) else problem.objective
    analytic = getattr(problem, "objective_gradient", None)
    if method == "analytic" or (method == "auto" and analytic is not None):
        if analytic is None:
            raise ValueError("no analytic gradient registered")
        g = np.asarray(analytic(x), dtype=float)
    else:
        h = _fd_steps(x, rel_step)
        g = np.empty_like(x)
        for i in range(x.size):
            xp = x.copy()
            xm = x.copy()
            xp[i] += h[i]
            xm[i] -= h[i]
            g[i] = (fun(xp) - fun(xm)) / (2.0 * h[i])
    if not np.all(np.isfinite(g)):
        raise NonFiniteEvaluation("gradient contains non-finite entries")
    return g


def fd_jacobian(fun, x, rel_step=1e-6):
    """Dense central-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    h = _fd_steps(x, rel_step)
    cols = []
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        cols.append((np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h[i]))
    return np.stack(cols, axis=1) if cols else np.zeros((0, 0))


class NLP:
    """Plain callable-based NLP; missing derivatives fall back to differences."""

    def __init__(self, objective, x0, lb=None, ub=None, constraints=None, cl=None, cu=None,
                 objective_gradient=None, jacobian=None):
        self.x0 = np.asarray(x0, dtype=float).copy()
        n = self.x0.size
        self.n = n
        self.lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
        self.ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
        self._objective = objective
        self._gradient = objective_gradient
        self._constraints = constraints
        self._jacobian = jacobian
        if constraints is None:
            self.m = 0
            self.cl = np.zeros(0)
            self.cu = np.zeros(0)
        else:
            self.m = np.atleast_1d(constraints(self.x0)).size
            self.cl = np.full(self.m, -np.inf) if cl is None else np.broadcast_to(
                np.asarray(cl, dtype=float), (self.m,)).copy()
            self.cu = np.full(self.m, np.inf) if cu is None else np.broadcast_to(
                np.asarray(cu, dtype=float), (self.m,)).copy()

    def objective(self, x):
        return float(self._objective(x))

    def objective_gradient(self, x):
        if self._gradient is None:
            return gradient(self._objective, x, method="fd")
        return np.asarray(self._gradient(x), dtype=float)

    def constraints(self, x):
        if self._constraints is None:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self._constraints(x), dtype=float))

    def jacobian(self, x):
        if self._constraints is None:
            return np.zeros((0, self.n))
        if self._jacobian is None:
            return fd_jacobian(self.constraints, x)
        return self._jacobian(x)


@dataclass
class SolverOptions:
    outer_tol: float = 1e-6
    inner_tol: float = 1e-6
    max_outer: int = 40
    max_inner: int = 5000
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e12
    fd_step: float = 1e-6
    seed: int = 0
    max_stalls: int = 3
    memory: int = 30
    verbose: bool = False
    inner_method: str = "auto"
    dense_limit: int = 3000
    lm_memory: int = 10
    slacks: bool = True

    def __post_init__(self):
        if self.outer_tol <= 0 or self.inner_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.inner_method not in ("auto", "lbfgsb", "structured"):
            raise ValueError(f"unknown inner method {self.inner_method!r}")
        if self.rho_growth <= 1:
            raise ValueError("penalty growth factor must exceed 1")


@dataclass
class SolveResult:
    x: np.ndarray
    f: float
    infeasibility: float
    multipliers: np.ndarray
    status: str
    kkt: float
    log: list = field(default_factory=list)
    message: str = ""
    n_inner: int = 0
    n_rejected: int = 0

    @property
    def converged(self):
        return self.status == "Converged"

    def write_log(self, path):
        """Iteration log CSV: ``outer, inner, f, infeas, rho, grad_norm``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["outer", "inner", "f", "infeas", "rho", "grad_norm"])
            for row in self.log:
                w.writerow([row["outer"], row["inner"], repr(row["f"]), repr(row["infeas"]),
                            repr(row["rho"]), repr(row["grad_norm"])])


class _Terms:
    """Splits range constraints into equality, upper and lower parts."""

    def __init__(self, cl, cu):
        self.eq = np.isfinite(cl) & np.isfinite(cu) & (cl == cu)
        self.up = np.isfinite(cu) & ~self.eq
        self.lo = np.isfinite(cl) & ~self.eq
        self.cl = np.where(np.isfinite(cl), cl, 0.0)
        self.cu = np.where(np.isfinite(cu), cu, 0.0)

    def violation(self, c):
        if c.size == 0:
            return 0.0
        v = np.zeros_like(c)
        v = np.where(self.eq, np.abs(c - self.cl), v)
        v = np.maximum(v, np.where(self.up, c - self.cu, 0.0))
        v = np.maximum(v, np.where(self.lo, self.cl - c, 0.0))
        return float(v.max())

    def penalty(self, c, lam_eq, mu_up, mu_lo, rho):
        """Augmented terms and the effective multiplier per row."""
        r = np.where(self.eq, c - self.cl, 0.0)
        gu = np.where(self.up, c - self.cu, 0.0)
        gl = np.where(self.lo, self.cl - c, 0.0)
        su = np.where(self.up, np.maximum(0.0, mu_up + rho * gu), 0.0)
        sl = np.where(self.lo, np.maximum(0.0, mu_lo + rho * gl), 0.0)
        val = (lam_eq @ r + 0.5 * rho * (r @ r)
               + (su @ su - mu_up @ mu_up + sl @ sl - mu_lo @ mu_lo) / (2.0 * rho))
        y = np.where(self.eq, lam_eq + rho * r, 0.0) + su - sl
        return val, y, su, sl


def _projected_norm(x, g, lb, ub):
    return float(np.max(np.abs(x - np.clip(x - g, lb, ub)), initial=0.0))


def _jt(J, y):
    if sparse.issparse(J):
        return J.T @ y
    return np.asarray(J).T @ y


def _gram(J, rows, cols):
    """Dense ``J[rows][:, cols]^T J[rows][:, cols]``."""
    if sparse.issparse(J):
        Jr = J.tocsr()[rows][:, cols]
        return (Jr.T @ Jr).toarray()
    Jr = np.asarray(J)[np.ix_(rows, cols)]
    return Jr.T @ Jr


def _times(J, rows, v):
    if sparse.issparse(J):
        return J.tocsr()[rows] @ v
    return np.asarray(J)[rows] @ v


class _Structured:
    """Projected structured quasi-Newton minimiser of the augmented Lagrangian.

    The model Hessian is ``M + rho * Ja^T Ja``: the penalty curvature of the
    active rows (equalities and violated hinges) is taken exactly from the
    constraint Jacobian, while ``M`` is a damped BFGS approximation of the
    remaining curvature (objective plus multiplier-weighted constraint
    curvature). Bounds are treated with an active set and a projected
    backtracking line search. ``M`` is kept across outer iterations.
    """

    def __init__(self, n):
        self.M = None
        self.n = n

    def _update(self, s, y):
        if self.M is None:
            sy = s @ y
            scale = (y @ y) / sy if sy > 0 else 1.0
            self.M = np.eye(self.n) * min(max(scale, 1e-8), 1e8)
        Ms = self.M @ s
        sMs = s @ Ms
        if not sMs > 0:
            return
        sy = s @ y
        if sy < 0.2 * sMs:
            theta = 0.8 * sMs / (sMs - sy)
            y = theta * y + (1.0 - theta) * Ms
            sy = s @ y
        self.M += np.outer(y, y) / sy - np.outer(Ms, Ms) / sMs

    def _direction(self, F, J, rows, rho, gF):
        H = self.M[np.ix_(F, F)] if self.M is not None else np.eye(F.size)
        if rows.size:
            H = H + rho * _gram(J, rows, F)
        mu = 0.0
        diag = max(float(np.max(np.abs(np.diag(H)))), 1e-300)
        while True:
            try:
                factor = linalg.cho_factor(H + mu * np.eye(F.size), check_finite=False)
                return -linalg.cho_solve(factor, gF, check_finite=False)
            except linalg.LinAlgError:
                mu = max(10.0 * mu, 1e-10 * diag)

    def minimize(self, ev, x, lb, ub, rho, gtol, max_iter):
        """Returns ``(x, iterations, message)``; ``ev(x) -> (phi, g, J, rows)``."""
        fixed = lb == ub
        phi, g, J, rows = ev(x)
        it = 0
        message = "max iterations"
        for it in range(1, max_iter + 1):
            pg = _projected_norm(x, g, lb, ub)
            if pg <= gtol:
                message = "gradient tolerance"
                it -= 1
                break
            eps = min(1e-10, pg)
            active = fixed | ((x <= lb + eps) & (g > 0)) | ((x >= ub - eps) & (g < 0))
            F = np.flatnonzero(~active)
            if F.size == 0:
                message = "all variables at bounds"
                break
            d = np.zeros_like(x)
            d[F] = self._direction(F, J, rows, rho, g[F])
            if not g @ d < 0:
                d = np.where(active, 0.0, -g)
            alpha = 1.0
            accepted = False
            for _ in range(40):
                xn = np.clip(x + alpha * d, lb, ub)
                phin, gn, Jn, rowsn = ev(xn)
                if np.isfinite(phin) and phin <= phi + 1e-4 * (g @ (xn - x)):
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                message = "line search failure"
                break
            s = xn - x
            y = gn - g
            if rowsn.size:
                y = y - rho * _jt_rows(Jn, rowsn, _times(Jn, rowsn, s))
            self._update(s, y)
            small = np.max(np.abs(s), initial=0.0) <= 1e-15 * (1.0 + np.max(np.abs(x)))
            x, phi, g, J, rows = xn, phin, gn, Jn, rowsn
            if small:
                message = "step below resolution"
                break
        return x, it, message


class _LimitedStructured(_Structured):
    """Limited-memory form of :class:`_Structured` for large sparse problems.

    ``M`` is kept in compact form ``sigma I - W K^{-1} W^T`` built from the
    last ``memory`` pairs, so the step solves a sparse LU factorisation of
    ``sigma I + rho Ja^T Ja`` plus a small Woodbury correction.
    """

    def __init__(self, n, memory=10):
        super().__init__(n)
        self.memory = memory
        self.S = []
        self.Y = []
        self.sigma = 1.0

    def _parts(self):
        S = np.column_stack(self.S)
        Y = np.column_stack(self.Y)
        SY = S.T @ Y
        K = np.block([[self.sigma * (S.T @ S), np.tril(SY, -1)],
                      [np.tril(SY, -1).T, -np.diag(np.diag(SY))]])
        return np.hstack([self.sigma * S, Y]), K

    def _times_M(self, v):
        if not self.S:
            return self.sigma * v
        W, K = self._parts()
        return self.sigma * v - W @ np.linalg.solve(K, W.T @ v)

    def _update(self, s, y):
        Ms = self._times_M(s)
        sMs = s @ Ms
        if not sMs > 0:
            return
        sy = s @ y
        if sy < 0.2 * sMs:
            theta = 0.8 * sMs / (sMs - sy)
            y = theta * y + (1.0 - theta) * Ms
            sy = s @ y
        self.S.append(s.copy())
        self.Y.append(y.copy())
        if len(self.S) > self.memory:
            self.S.pop(0)
            self.Y.pop(0)
        self.sigma = min(max((y @ y) / sy, 1e-8), 1e8)

    def _direction(self, F, J, rows, rho, gF):
        A = self.sigma * sparse.identity(F.size, format="csc")
        if rows.size:
            JF = J.tocsr()[rows][:, F] if sparse.issparse(J) else sparse.csr_matrix(
                np.asarray(J)[np.ix_(rows, F)])
            A = (A + rho * (JF.T @ JF)).tocsc()
        lu = splu(A)
        if not self.S:
            return -lu.solve(gF)
        W, K = self._parts()
        WF = W[F]
        AiW = lu.solve(WF)
        Aig = lu.solve(gF)
        # (A - W K^{-1} W^T)^{-1} g by the Woodbury identity
        inner = WF.T @ AiW - K
        return -(Aig - AiW @ np.linalg.solve(inner, WF.T @ Aig))


def _jt_rows(J, rows, v):
    if sparse.issparse(J):
        return J.tocsr()[rows].T @ v
    return np.asarray(J)[rows].T @ v


class _SlackForm:
    """``c_I(x) - s = 0`` with ``s`` in ``[cl_I, cu_I]`` for the inequality rows ``I``."""

    def __init__(self, nlp, rows, x0):
        self.base = nlp
        self.rows = rows
        self.n_x = np.asarray(x0).size
        k = rows.size
        cl = np.asarray(nlp.cl, dtype=float)
        cu = np.asarray(nlp.cu, dtype=float)
        c0 = np.asarray(nlp.constraints(x0), dtype=float)
        self.x0 = np.concatenate([x0, np.clip(c0[rows], cl[rows], cu[rows])])
        self.lb = np.concatenate([nlp.lb, cl[rows]])
        self.ub = np.concatenate([nlp.ub, cu[rows]])
        self.cl = np.where(np.isin(np.arange(cl.size), rows), 0.0, cl)
        self.cu = self.cl.copy()
        self.E = sparse.csr_matrix((-np.ones(k), (rows, np.arange(k))), shape=(cl.size, k))

    def split(self, z):
        return z[: self.n_x], z[self.n_x:]

    def objective(self, z):
        return self.base.objective(z[: self.n_x])

    def objective_gradient(self, z):
        g = self.base.objective_gradient(z[: self.n_x])
        return np.concatenate([g, np.zeros(self.rows.size)])

    def constraints(self, z):
        x, sl = self.split(z)
        c = np.asarray(self.base.constraints(x), dtype=float).copy()
        c[self.rows] -= sl
        return c

    def jacobian(self, z):
        J = self.base.jacobian(z[: self.n_x])
        if not sparse.issparse(J):
            J = sparse.csr_matrix(np.asarray(J))
        return sparse.hstack([J, self.E], format="csr")


def solve(nlp, options=None, x0=None, multipliers=None):
    """Augmented-Lagrangian solve; see the module docstring.

    Returns a :class:`SolveResult`. With slacks the iteration log and the
    KKT residual refer to the slack form; ``infeasibility`` is the violation
    of the original rows, which never exceeds the logged one.
    """
    opt = options or SolverOptions()
    start = np.clip(np.asarray(nlp.x0 if x0 is None else x0, dtype=float),
                    np.asarray(nlp.lb, dtype=float), np.asarray(nlp.ub, dtype=float))
    cl, cu = np.asarray(nlp.cl, dtype=float), np.asarray(nlp.cu, dtype=float)
    ineq = np.flatnonzero(~(np.isfinite(cl) & np.isfinite(cu) & (cl == cu)))
    if not opt.slacks or ineq.size == 0:
        return _solve(nlp, opt, start, multipliers)
    wrapped = _SlackForm(nlp, ineq, start)
    res = _solve(wrapped, opt, wrapped.x0, multipliers)
    x, _ = wrapped.split(res.x)
    res.x = x
    if cl.size:
        res.infeasibility = _Terms(cl, cu).violation(np.asarray(nlp.constraints(x), dtype=float))
    return res


def _solve(nlp, opt, x0, multipliers):
    """Augmented-Lagrangian solve.

    The outer iterate is accepted only if it does not increase the maximum
    constraint violation (that of an infeasible start included); otherwise the penalty grows and the inner solve is
    repeated from the last accepted point. The penalty also grows whenever
    the violation falls by less than a factor of ten.
    """
    lb, ub = np.asarray(nlp.lb, dtype=float), np.asarray(nlp.ub, dtype=float)
    x = np.clip(np.asarray(nlp.x0 if x0 is None else x0, dtype=float), lb, ub)
    cl, cu = np.asarray(nlp.cl, dtype=float), np.asarray(nlp.cu, dtype=float)
    terms = _Terms(cl, cu)
    m = cl.size
    lam = np.zeros(m) if multipliers is None else np.asarray(multipliers, dtype=float).copy()
    # split a signed multiplier guess into the three families
    lam_eq = np.where(terms.eq, lam, 0.0)
    mu_up = np.where(terms.up, np.maximum(lam, 0.0), 0.0)
    mu_lo = np.where(terms.lo, np.maximum(-lam, 0.0), 0.0)
    rho = opt.rho0

    def check(v, what):
        if not np.all(np.isfinite(v)):
            raise NonFiniteEvaluation(f"{what} is not finite")
        return v

    def aug(z):
        f = check(nlp.objective(z), "objective")
        g = check(nlp.objective_gradient(z), "objective gradient")
        if m == 0:
            return f, g
        c = check(nlp.constraints(z), "constraints")
        val, y, _, _ = terms.penalty(c, lam_eq, mu_up, mu_lo, rho)
        return f + val, g + _jt(nlp.jacobian(z), y)

    bounds = optimize.Bounds(lb, ub)
    c0 = nlp.constraints(x) if m else np.zeros(0)
    check(c0, "constraints")
    # An infeasible start (typically a warm start) counts as accepted, so it
    # is never traded for a less feasible first iterate. A feasible start
    # says nothing about the multipliers, so the first iterate is taken as is.
    v0 = terms.violation(c0) if m else 0.0
    best_infeas = v0 if v0 > opt.outer_tol else math.inf
    log = []
    status, message = "MaxIter", "maximum outer iterations reached"
    stalls = n_inner = n_rej = 0
    kkt = math.inf
    last_line_search_failure = False

    method = opt.inner_method
    if method == "auto":
        method = "structured" if m > 0 else "lbfgsb"
    qn = None
    if method == "structured":
        qn = (_Structured(x.size) if x.size <= opt.dense_limit
              else _LimitedStructured(x.size, opt.lm_memory))

    def aug_structured(z):
        f = check(nlp.objective(z), "objective")
        g = check(nlp.objective_gradient(z), "objective gradient")
        c = check(nlp.constraints(z), "constraints")
        val, y, su, sl = terms.penalty(c, lam_eq, mu_up, mu_lo, rho)
        J = nlp.jacobian(z)
        rows = np.flatnonzero(terms.eq | (su > 0) | (sl > 0))
        return f + val, g + _jt(J, y), J, rows

    for outer in range(1, opt.max_outer + 1):
        # inexact inner solves: loose while far from feasible, tight near the end
        gtol = (max(opt.inner_tol, min(1e-3, 0.1 * best_infeas)) if log
                else opt.inner_tol)
        if qn is not None:
            z, nit, msg = qn.minimize(aug_structured, x, lb, ub, rho, gtol, opt.max_inner)
            n_inner += nit
            last_line_search_failure = msg == "line search failure"
            res = optimize.OptimizeResult(x=z, nit=nit, message=msg)
        else:
            res = optimize.minimize(
                aug, x, jac=True, method="L-BFGS-B", bounds=bounds,
                options=dict(maxiter=opt.max_inner, gtol=gtol, ftol=1e-15,
                             maxcor=opt.memory, maxfun=2 * opt.max_inner))
            n_inner += int(res.nit)
            last_line_search_failure = "ABNORMAL" in str(res.message).upper()
        z = res.x
        c = nlp.constraints(z) if m else np.zeros(0)
        infeas = terms.violation(c)
        if infeas > best_infeas:
            n_rej += 1
            if rho >= opt.rho_max:
                stalls += 1
            rho = min(rho * opt.rho_growth, opt.rho_max)
            if stalls >= opt.max_stalls:
                status, message = "Stalled", "infeasibility no longer decreases"
                break
            continue
        # the start only guards against a worse first iterate; it does not
        # count as progress for the penalty update
        prev = best_infeas if log else math.inf
        x = z
        best_infeas = infeas
        f = nlp.objective(x)
        if m:
            _, y, su, sl = terms.penalty(c, lam_eq, mu_up, mu_lo, rho)
            lam_eq = np.where(terms.eq, y, 0.0)
            mu_up, mu_lo = su, sl
        grad_l = nlp.objective_gradient(x) + (_jt(nlp.jacobian(x), lam_eq + mu_up - mu_lo)
                                              if m else 0.0)
        kkt = _projected_norm(x, grad_l, lb, ub)
        log.append(dict(outer=outer, inner=int(res.nit), f=float(f), infeas=infeas, rho=rho,
                        grad_norm=kkt))
        if opt.verbose:
            print(f"outer {outer:3d} inner {res.nit:5d} f {f: .8e} infeas {infeas:.2e} "
                  f"rho {rho:.1e} kkt {kkt:.2e}")
        if infeas <= opt.outer_tol and kkt <= opt.inner_tol:
            status, message = "Converged", "tolerances met"
            break
        if infeas > opt.outer_tol and infeas > 0.1 * prev:
            if rho >= opt.rho_max:
                stalls += 1
            rho = min(rho * opt.rho_growth, opt.rho_max)
        else:
            stalls = 0
        if stalls >= opt.max_stalls:
            status, message = "Stalled", "infeasibility no longer decreases"
            break
    if last_line_search_failure and status != "Converged":
        message += "; line search failure in the inner solver"
    mult = lam_eq + mu_up - mu_lo
    return SolveResult(x=x, f=float(nlp.objective(x)), infeasibility=best_infeas
                       if math.isfinite(best_infeas) else v0,
                       multipliers=mult, status=status, kkt=kkt, log=log, message=message,
                       n_inner=n_inner, n_rejected=n_rej)
