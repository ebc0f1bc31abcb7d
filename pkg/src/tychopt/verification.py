"""Independent re-propagation, Monte Carlo statistics and risk estimates.

Everything here uses :func:`tychopt.dynamics.propagate_rk45` with the
linearly interpolated optimised control, never the collocation states, so
the checks do not share any discretisation with the optimiser.
"""
from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import chi2

from .dynamics import propagate_rk45
from .errors import NotPSD
from .uncertainty import sample

__all__ = [
    "EllipseGeometry",
    "MonteCarloReport",
    "FeasibilityReport",
    "monte_carlo",
    "risk_curve",
    "default_epsilon_grid",
    "covariance_ellipse",
    "feasibility_check",
    "estimate_event_probability",
    "default_workers",
    "svg_scatter",
    "svg_risk",
]

WORKERS_ENV = "TYCHOPT_WORKERS"


def default_workers():
    """Worker count from ``TYCHOPT_WORKERS`` (default 1)."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def default_epsilon_grid():
    """50 log-spaced radii from 0.01 to 2."""
    return np.logspace(np.log10(0.01), np.log10(2.0), 50)


@dataclass(frozen=True)
class EllipseGeometry:
    center: np.ndarray
    semi_axes: np.ndarray
    angle: float
    confidence: float

    def contains(self, points):
        """Boolean mask of the columns of ``points`` (2 x n) inside the ellipse."""
        d = np.asarray(points, dtype=float) - np.asarray(self.center)[:, None]
        c, s = math.cos(self.angle), math.sin(self.angle)
        a = c * d[0] + s * d[1]
        b = -s * d[0] + c * d[1]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = (a / self.semi_axes[0]) ** 2 + (b / self.semi_axes[1]) ** 2
        return r <= 1.0

    def boundary(self, n=181):
        th = np.linspace(0.0, 2.0 * np.pi, n)
        c, s = math.cos(self.angle), math.sin(self.angle)
        a = self.semi_axes[0] * np.cos(th)
        b = self.semi_axes[1] * np.sin(th)
        return np.stack([self.center[0] + c * a - s * b, self.center[1] + s * a + c * b])


def covariance_ellipse(cov2, center=(0.0, 0.0), confidence=0.95):
    """Confidence ellipse of a 2-D Gaussian.

    Semi-axes are ``sqrt(lambda_i * chi2_2(confidence))`` for the eigenvalues
    ``lambda_i`` of ``cov2`` (largest first); ``angle`` is the direction of
    the leading eigenvector, in ``(-pi/2, pi/2]``.
    """
    cov2 = np.asarray(cov2, dtype=float)
    if cov2.shape != (2, 2):
        raise ValueError("covariance must be 2 x 2")
    if not np.allclose(cov2, cov2.T, rtol=1e-12, atol=1e-300):
        raise NotPSD("covariance must be symmetric")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    vals, vecs = np.linalg.eigh(cov2)
    scale = max(abs(vals).max(), np.finfo(float).tiny)
    if vals.min() < -1e-12 * scale:
        raise NotPSD(f"covariance has negative eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)[::-1]
    lead = vecs[:, 1]
    angle = math.atan2(lead[1], lead[0])
    if angle <= -math.pi / 2:
        angle += math.pi
    elif angle > math.pi / 2:
        angle -= math.pi
    if abs(vals[0] - vals[1]) <= 1e-14 * scale:
        angle = 0.0
    q = chi2.ppf(confidence, 2)
    return EllipseGeometry(np.asarray(center, dtype=float).copy(), np.sqrt(vals * q),
                           float(angle), float(confidence))


@dataclass
class MonteCarloReport:
    """Endpoint statistics of a Monte Carlo run.

    ``endpoints`` holds one row per successful sample; ``all_endpoints`` keeps
    every sample in order with NaN rows for failed propagations.
    """

    n: int
    seed: int
    output_names: tuple
    params: np.ndarray
    final_states: np.ndarray
    all_endpoints: np.ndarray
    success: np.ndarray
    mean: np.ndarray
    cov: Optional[np.ndarray]
    ellipses: dict = field(default_factory=dict)
    risk: Optional[np.ndarray] = None
    target: Optional[np.ndarray] = None
    tf: float = float("nan")

    @property
    def endpoints(self):
        return self.all_endpoints[self.success]

    @property
    def excluded(self):
        return int(self.n - np.count_nonzero(self.success))

    @property
    def n_ok(self):
        return int(np.count_nonzero(self.success))

    @property
    def standard_error(self):
        if self.cov is None:
            return np.full(self.mean.shape, np.nan)
        return np.sqrt(np.diag(self.cov) / self.n_ok)

    @property
    def trace_cov(self):
        return float(np.trace(self.cov)) if self.cov is not None else float("nan")

    def to_dict(self):
        doc = {
            "n": self.n,
            "seed": self.seed,
            "outputs": list(self.output_names),
            "mean": [float(v) for v in self.mean],
            "cov": None if self.cov is None else [[float(v) for v in r] for r in self.cov],
            "risk_curve": [] if self.risk is None else [[float(e), float(r)]
                                                        for e, r in self.risk],
            "excluded": self.excluded,
            "tf": float(self.tf),
            "target": None if self.target is None else [float(v) for v in self.target],
            "success": [bool(v) for v in self.success],
            "endpoints": [[float(v) if np.isfinite(v) else None for v in row]
                          for row in self.all_endpoints],
        }
        return doc

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, path):
        """Report read back from :meth:`to_json` (parameters and states are not stored)."""
        with open(path) as fh:
            doc = json.load(fh)
        mean = np.asarray(doc["mean"], dtype=float)
        cov = None if doc["cov"] is None else np.asarray(doc["cov"], dtype=float)
        risk = np.asarray(doc["risk_curve"], dtype=float).reshape(-1, 2)
        Y = np.array([[np.nan if v is None else v for v in row] for row in doc["endpoints"]],
                     dtype=float).reshape(-1, mean.size)
        target = None if doc.get("target") is None else np.asarray(doc["target"], dtype=float)
        return cls(doc["n"], doc["seed"], tuple(doc.get("outputs", ())), np.zeros((0, Y.shape[0])),
                   np.zeros((0, Y.shape[0])), Y, np.asarray(doc["success"], dtype=bool), mean,
                   cov, risk=risk if risk.size else None, target=target, tf=doc.get("tf", np.nan))

    def samples_csv(self, path):
        """Write ``sample, ok, p..., outputs...`` rows, one per sample."""
        names = list(self.output_names) or [f"y{j + 1}" for j in range(self.mean.size)]
        pnames = [f"p{j + 1}" for j in range(self.params.shape[0])]
        with open(path, "w") as fh:
            fh.write(",".join(["sample", "ok"] + pnames + names) + "\n")
            for j in range(self.n):
                row = [str(j), str(int(self.success[j]))]
                row += [repr(float(v)) for v in self.params[:, j]]
                row += [repr(float(v)) for v in self.all_endpoints[j]]
                fh.write(",".join(row) + "\n")


def _propagate_chunks(problem, control, x0, params, tol, workers):
    n = params.shape[1]
    workers = max(1, min(int(workers), n))
    bounds = np.linspace(0, n, workers + 1).astype(int)

    def run(k):
        sl = slice(bounds[k], bounds[k + 1])
        tr = propagate_rk45(problem.field, x0[:, sl], control, params[:, sl], tol=tol,
                            t_eval=[control.t0, control.tf], raise_on_failure=False)
        return tr.x[-1], np.asarray(tr.success, dtype=bool)

    if workers == 1:
        parts = [run(0)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, range(workers)))
    xf = np.concatenate([p[0] for p in parts], axis=1)
    ok = np.concatenate([p[1] for p in parts])
    return xf, ok


def monte_carlo(problem, control, n, seed, outputs=None, tol=1e-9, workers=None,
                epsilons=None, confidence=0.95, target=None, distribution=None):
    """Monte Carlo propagation of ``control`` over sampled parameters.

    Parameters
    ----------
    problem : TychasticProblem
    control : ControlSolution
        Interpolated linearly; the run covers the control's time grid.
    n : int
        Number of samples.
    seed : int
        Seed of the counter-based sample stream; results do not depend on
        ``workers``.
    outputs : callable, optional
        Map from final states ``(N_x, n)`` to outputs; defaults to the
        problem's outputs (the state itself if none are declared).

    Returns
    -------
    MonteCarloReport
        Unbiased (``n - 1``) covariance over successful samples; failures
        are excluded from the statistics but count as misses in the risk
        curve.
    """
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    dist = problem.distribution if distribution is None else distribution
    params = sample(dist, n, seed)
    x0 = problem.x0
    X0 = (np.asarray(x0(params), dtype=float).reshape(problem.field.n_x, n) if callable(x0)
          else np.repeat(np.asarray(x0, dtype=float)[:, None], n, axis=1))
    xf, ok = _propagate_chunks(problem, control, X0, params, tol,
                               default_workers() if workers is None else workers)
    out = problem.output_values if outputs is None else outputs
    Y = np.full((n, 0), np.nan)
    good = ok & np.all(np.isfinite(xf), axis=0)
    if np.any(good):
        vals = np.asarray(out(xf[:, good]), dtype=float)
        Y = np.full((n, vals.shape[0]), np.nan)
        Y[good] = vals.T
    n_ok = int(good.sum())
    mean = Y[good].mean(axis=0) if n_ok else np.full(Y.shape[1], np.nan)
    cov = None
    if n_ok >= 2:
        cov = np.cov(Y[good].T, ddof=1).reshape(Y.shape[1], Y.shape[1])
    else:
        warnings.warn("fewer than two successful samples; covariance omitted", RuntimeWarning,
                      stacklevel=2)
    names = tuple(problem.names_of_outputs()) if outputs is None else ()
    report = MonteCarloReport(n=n, seed=int(seed), output_names=names, params=params,
                              final_states=xf, all_endpoints=Y, success=good, mean=mean, cov=cov,
                              tf=control.tf)
    if cov is not None:
        k = Y.shape[1]
        for i in range(k):
            for j in range(i + 1, k):
                sub = cov[np.ix_([i, j], [i, j])]
                report.ellipses[(i, j)] = covariance_ellipse(0.5 * (sub + sub.T),
                                                             mean[[i, j]], confidence)
    tgt = target if target is not None else problem.target
    if tgt is not None and np.size(tgt) == Y.shape[1]:
        report.target = np.asarray(tgt, dtype=float)
        report.risk = risk_curve(report, report.target, epsilons)
    return report


def risk_curve(report, target, epsilons=None):
    """Empirical ``r*(eps)``: fraction of samples farther than ``eps`` from ``target``.

    Distances are Euclidean in the report's output space. Failed samples
    count as misses. Returns an ``(len(eps), 2)`` array of ``(eps, r*)``.
    """
    eps = default_epsilon_grid() if epsilons is None else np.atleast_1d(
        np.asarray(epsilons, dtype=float))
    Y = report.all_endpoints
    d = np.linalg.norm(Y - np.asarray(target, dtype=float)[None, :], axis=1)
    d = np.where(report.success, d, np.inf)
    n = Y.shape[0]
    r = np.array([np.count_nonzero(d > e) / n for e in eps])
    return np.column_stack([eps, r])


def estimate_event_probability(report, event):
    """Fraction of successful samples with ``event(xf, tf, p) <= 0``.

    ``event`` may return booleans (taken as the event itself) or values that
    must all be non-positive. Returns ``(probability, standard_error)``.
    """
    xf = report.final_states[:, report.success]
    p = report.params[:, report.success]
    v = np.asarray(event(xf, report.tf, p))
    hit = v if v.dtype == bool else (v <= 0)
    if hit.ndim > 1:
        hit = np.all(hit, axis=0)
    n = hit.size
    if n == 0:
        return float("nan"), float("nan")
    prob = float(np.count_nonzero(hit)) / n
    return prob, math.sqrt(prob * (1.0 - prob) / n)


@dataclass
class FeasibilityReport:
    passed: bool
    endpoint_violation: float
    path_violation: float
    terminal_miss: float
    final_state: np.ndarray
    tolerance: float
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "endpoint_violation": float(self.endpoint_violation),
            "path_violation": float(self.path_violation),
            "terminal_miss": float(self.terminal_miss),
            "final_state": [float(v) for v in self.final_state],
            "tolerance": float(self.tolerance),
            "details": self.details,
        }


def _violation(v, lo, hi):
    v = np.asarray(v, dtype=float)
    return float(np.max(np.maximum(np.maximum(lo - v, v - hi), 0.0), initial=0.0))


def feasibility_check(problem, control, tolerance=1e-3, tol=1e-10, p=None):
    """Re-propagate at the nominal parameter and measure bound violations.

    Endpoint constraints are evaluated on the single nominal trajectory
    (a variance constraint is trivially met there); path constraints at
    the control grid times. Passes when every violation is within
    ``tolerance``.
    """
    p = problem.nominal if p is None else np.asarray(p, dtype=float)
    x0 = problem.x0(p[:, None])[:, 0] if callable(problem.x0) else np.asarray(problem.x0, float)
    tr = propagate_rk45(problem.field, x0, control, p, tol=tol, raise_on_failure=False)
    xf = tr.x[-1]
    tf = control.tf
    if not np.all(tr.success) or not np.all(np.isfinite(xf)):
        return FeasibilityReport(False, math.inf, math.inf, math.inf, xf, tolerance,
                                 {"propagation": "failed"})
    details = {}
    ep = 0.0
    for c in problem.endpoint:
        v = np.asarray(c.fun(xf[:, None], tf, p[:, None]), dtype=float).reshape(-1)
        viol = 0.0 if c.mode == "variance" else _violation(v, c.lower, c.upper)
        details[c.name] = viol
        ep = max(ep, viol)
    pv = 0.0
    for c in problem.path:
        u = control(tr.t)
        v = np.asarray(c.fun(tr.x.T, u, tr.t, p[:, None]), dtype=float)
        viol = _violation(v.reshape(c.size, -1), c.lower[:, None], c.upper[:, None])
        details[c.name] = viol
        pv = max(pv, viol)
    miss = math.nan
    if problem.target is not None:
        y = np.asarray(problem.output_values(xf[:, None]), dtype=float).reshape(-1)
        if y.size == np.size(problem.target):
            miss = float(np.linalg.norm(y - problem.target))
    passed = ep <= tolerance and pv <= tolerance and not (miss > tolerance and not problem.endpoint)
    return FeasibilityReport(bool(passed), ep, pv, miss, xf, tolerance, details)


# -- SVG output ------------------------------------------------------------


def _fmt(v):
    return f"{v:.6g}"


class _Canvas:
    def __init__(self, xlim, ylim, width=480, height=400, margin=60):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x0, self.x1 = self.x0 - 1, self.x0 + 1
        if self.y1 <= self.y0:
            self.y0, self.y1 = self.y0 - 1, self.y0 + 1
        self.w, self.h, self.m = width, height, margin
        self.items = []

    def px(self, x, y):
        sx = self.m + (np.asarray(x) - self.x0) / (self.x1 - self.x0) * (self.w - 2 * self.m)
        sy = self.h - self.m - (np.asarray(y) - self.y0) / (self.y1 - self.y0) * (
            self.h - 2 * self.m)
        return sx, sy

    def points(self, x, y, color="#1f77b4", r=1.5):
        sx, sy = self.px(x, y)
        for a, b in zip(sx, sy):
            self.items.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="{r}" fill="{color}" '
                              'fill-opacity="0.5"/>')

    def line(self, x, y, color="#d62728", width=1.5, label=None):
        sx, sy = self.px(x, y)
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(sx, sy))
        self.items.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                          f'stroke-width="{width}"/>')

    def render(self, xlabel, ylabel, title=""):
        w, h, m = self.w, self.h, self.m
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
               f'viewBox="0 0 {w} {h}">',
               f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" fill="none" '
               'stroke="black"/>']
        for k in range(5):
            fx = self.x0 + k / 4 * (self.x1 - self.x0)
            fy = self.y0 + k / 4 * (self.y1 - self.y0)
            sx, _ = self.px(fx, self.y0)
            _, sy = self.px(self.x0, fy)
            out.append(f'<text x="{_fmt(sx)}" y="{h - m + 16}" font-size="10" '
                       f'text-anchor="middle">{_fmt(fx)}</text>')
            out.append(f'<text x="{m - 4}" y="{_fmt(sy)}" font-size="10" '
                       f'text-anchor="end">{_fmt(fy)}</text>')
        out.append(f'<text x="{w / 2}" y="{h - 12}" font-size="12" '
                   f'text-anchor="middle">{xlabel}</text>')
        out.append(f'<text x="14" y="{h / 2}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 14 {h / 2})">{ylabel}</text>')
        if title:
            out.append(f'<text x="{w / 2}" y="{m / 2}" font-size="13" '
                       f'text-anchor="middle">{title}</text>')
        out += self.items
        out.append("</svg>")
        return "\n".join(out) + "\n"


def _limits(*arrays):
    v = np.concatenate([np.ravel(a) for a in arrays])
    v = v[np.isfinite(v)]
    if v.size == 0:
        return (-1.0, 1.0)
    lo, hi = v.min(), v.max()
    pad = 0.05 * (hi - lo) if hi > lo else 1.0
    return (lo - pad, hi + pad)


def svg_scatter(report, i=0, j=1, path=None, extra=()):
    """Endpoint scatter of outputs ``i`` and ``j`` with the report's ellipse.

    ``extra`` is a sequence of ``(report, color)`` pairs overlaid on the plot.
    """
    names = report.output_names or tuple(f"y{k + 1}" for k in range(report.mean.size))
    groups = [(report, "#1f77b4", "#d62728")] + [(r, c, c) for r, c in extra]
    xs, ys = [], []
    for rep, _, _ in groups:
        E = rep.endpoints
        xs.append(E[:, i])
        ys.append(E[:, j])
        if (i, j) in rep.ellipses:
            b = rep.ellipses[(i, j)].boundary()
            xs.append(b[0])
            ys.append(b[1])
    cv = _Canvas(_limits(*xs), _limits(*ys))
    for rep, pc, lc in groups:
        E = rep.endpoints
        cv.points(E[:, i], E[:, j], color=pc)
        if (i, j) in rep.ellipses:
            b = rep.ellipses[(i, j)].boundary()
            cv.line(b[0], b[1], color=lc)
    text = cv.render(names[i], names[j], "Monte Carlo endpoints")
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def svg_risk(curves, path=None):
    """Risk curves ``[(label, (eps, r) table), ...]`` on one plot."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    eps = np.concatenate([c[:, 0] for _, c in curves])
    cv = _Canvas((float(eps.min()), float(eps.max())), (0.0, 1.0))
    legend = []
    for k, (label, c) in enumerate(curves):
        color = colors[k % len(colors)]
        cv.line(c[:, 0], c[:, 1], color=color)
        legend.append(f'<text x="{cv.w - cv.m - 4}" y="{cv.m + 14 + 14 * k}" font-size="11" '
                      f'text-anchor="end" fill="{color}">{label}</text>')
    cv.items += legend
    text = cv.render("epsilon", "r*(epsilon)", "Empirical risk")
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
