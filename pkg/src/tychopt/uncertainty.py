"""Gaussian parameter models, sigma-point cubature and reproducible sampling.

Parameter vectors are stored column-wise: a set of ``n`` parameter samples is
an ``(N_p, n)`` array, matching the layout used by the vector fields in
:mod:`tychopt.dynamics`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erfc

from .errors import (
    InfeasibleSigmaPoint,
    NonPositiveScaling,
    NotPSD,
    RejectionBudgetExceeded,
    UnknownName,
)

__all__ = [
    "GaussianSpec",
    "ConstrainedGaussianSpec",
    "SigmaSet",
    "psd_sqrt",
    "symmetric_sigma_points",
    "simplex_sigma_points",
    "sigma_points",
    "cubature_expectation",
    "cubature_covariance",
    "sample",
    "standard_normal_cdf",
    "register_constraint",
    "get_constraint",
    "inertia_triangle_inequality",
]

_EIG_CLAMP = 1e-14
_PSD_TOL = 1e-12


def psd_sqrt(cov):
    """Symmetric square root ``S`` with ``S @ S.T == cov``.

    Eigenvalues below ``1e-14 * trace`` are clamped to zero so singular
    covariances are accepted; clearly negative ones raise :class:`NotPSD`.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    vals, vecs = np.linalg.eigh(cov)
    scale = max(float(np.trace(cov)), 0.0)
    if vals.size and vals.min() < -_PSD_TOL * max(scale, np.finfo(float).tiny):
        raise NotPSD(f"covariance has negative eigenvalue {vals.min():.3e}")
    vals = np.where(vals < _EIG_CLAMP * scale, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """Normal distribution ``N(mean, covariance)`` of the uncertain parameter."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        cov = np.asarray(self.covariance, dtype=float)
        if cov.ndim == 1:
            cov = np.diag(cov)
        cov = np.atleast_2d(cov).copy()
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"covariance shape {cov.shape} does not match mean length {mean.size}")
        if np.max(np.abs(cov - cov.T), initial=0.0) != 0.0:
            raise ValueError("covariance must be exactly symmetric")
        vals = np.linalg.eigvalsh(cov)
        if vals.size and vals.min() < -_PSD_TOL * max(np.trace(cov), 0.0):
            raise NotPSD(f"covariance has negative eigenvalue {vals.min():.3e}")
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def diagonal(cls, mean, sigmas):
        sigmas = np.asarray(sigmas, dtype=float)
        return cls(mean, np.diag(sigmas ** 2))

    @classmethod
    def relative(cls, mean, relative_sigma):
        """Independent components with standard deviation ``relative_sigma * |mean|``."""
        mean = np.asarray(mean, dtype=float)
        return cls.diagonal(mean, relative_sigma * np.abs(mean))

    @property
    def dim(self):
        return self.mean.size

    @property
    def sqrt(self):
        return psd_sqrt(self.covariance)

    @property
    def base(self):
        return self

    def feasible(self, points):
        return np.ones(np.asarray(points).shape[1:], dtype=bool)


@dataclass(frozen=True, eq=False)
class ConstrainedGaussianSpec:
    """Gaussian restricted to the set where ``predicate`` holds.

    ``predicate`` receives an ``(N_p, n)`` array and returns ``n`` booleans.
    """

    base: GaussianSpec
    predicate: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    @property
    def mean(self):
        return self.base.mean

    @property
    def covariance(self):
        return self.base.covariance

    @property
    def dim(self):
        return self.base.dim

    @property
    def sqrt(self):
        return self.base.sqrt

    def feasible(self, points):
        points = np.asarray(points, dtype=float)
        return np.asarray(self.predicate(points.reshape(self.dim, -1)), dtype=bool).reshape(
            points.shape[1:])


@dataclass(frozen=True, eq=False)
class SigmaSet:
    """Cubature nodes (columns of ``points``) and their weights."""

    points: np.ndarray
    weights: np.ndarray
    scheme: str = "custom"

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float)).copy()
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        if points.shape[1] != weights.size:
            raise ValueError("number of points and weights differ")
        points.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def point(cls, p):
        """Degenerate one-node rule (weight one) at ``p``."""
        return cls(np.asarray(p, dtype=float).reshape(-1, 1), [1.0], scheme="point")

    @property
    def size(self):
        return self.weights.size

    @property
    def dim(self):
        return self.points.shape[0]

    def mean(self):
        return self.points @ self.weights

    def covariance(self):
        d = self.points - self.mean()[:, None]
        return (d * self.weights) @ d.T

    def permuted(self, order):
        order = np.asarray(order)
        return SigmaSet(self.points[:, order], self.weights[order], self.scheme)


def _check_feasible(spec, sigma):
    ok = spec.feasible(sigma.points)
    if not np.all(ok):
        bad = np.flatnonzero(~ok)
        raise InfeasibleSigmaPoint(
            f"sigma points {bad.tolist()} violate the distribution constraint")
    return sigma


def symmetric_sigma_points(spec, kappa=None):
    """Symmetric ``2 N_p + 1`` point set.

    The centre node sits at the mean with weight ``kappa / (N_p + kappa)``;
    the remaining nodes are ``mean +/- columns of sqrt((N_p + kappa) C)``,
    each weighted ``1 / (2 (N_p + kappa))``. ``kappa`` defaults to
    ``3 - N_p``.
    """
    n = spec.dim
    if kappa is None:
        kappa = 3.0 - n
    lam = n + kappa
    if not lam > 0:
        raise NonPositiveScaling(f"N_p + kappa = {lam} must be positive")
    root = psd_sqrt(lam * np.asarray(spec.covariance))
    mu = np.asarray(spec.mean)
    points = np.concatenate([mu[:, None], mu[:, None] + root, mu[:, None] - root], axis=1)
    weights = np.full(2 * n + 1, 1.0 / (2.0 * lam))
    weights[0] = kappa / lam
    return _check_feasible(spec, SigmaSet(points, weights, scheme="symmetric"))


def simplex_sigma_points(spec, w0=None):
    """Minimal-skew simplex set with ``N_p + 2`` nodes.

    Parameters
    ----------
    spec : GaussianSpec or ConstrainedGaussianSpec
    w0 : float, optional
        Weight of the centre node, ``0 <= w0 < 1``. Defaults to
        ``1 / (N_p + 2)``.
    """
    n = spec.dim
    if n < 1:
        raise ValueError("simplex sigma points need N_p >= 1")
    if w0 is None:
        w0 = 1.0 / (n + 2)
    if not 0.0 <= w0 < 1.0:
        raise NonPositiveScaling(f"centre weight {w0} must lie in [0, 1)")
    w = np.empty(n + 2)
    w[0] = w0
    w[1] = w[2] = (1.0 - w0) / 2.0 ** n
    for i in range(3, n + 2):
        w[i] = 2.0 ** (i - 2) * w[1]
    # unit sigma points built dimension by dimension
    z = np.zeros((n, n + 2))
    z[0, 1] = -1.0 / math.sqrt(2.0 * w[1])
    z[0, 2] = 1.0 / math.sqrt(2.0 * w[1])
    for j in range(2, n + 1):
        a = 1.0 / math.sqrt(2.0 * w[j + 1])
        z[j - 1, 1:j + 1] = -a
        z[j - 1, j + 1] = a
    points = np.asarray(spec.mean)[:, None] + psd_sqrt(spec.covariance) @ z
    return _check_feasible(spec, SigmaSet(points, w, scheme="simplex"))


def sigma_points(spec, scheme="symmetric", kappa=None):
    if scheme == "symmetric":
        return symmetric_sigma_points(spec, kappa)
    if scheme == "simplex":
        return simplex_sigma_points(spec)
    raise ValueError(f"unknown sigma-point scheme {scheme!r}")


def _evaluate_nodes(sigma, g):
    vals = [np.atleast_1d(np.asarray(g(sigma.points[:, i]), dtype=float))
            for i in range(sigma.size)]
    return np.stack(vals, axis=0)


def cubature_expectation(sigma, g):
    """Weighted node sum ``sum_i w_i g(p_i)``; ``g`` maps one parameter vector."""
    return sigma.weights @ _evaluate_nodes(sigma, g)


def cubature_covariance(sigma, g):
    """Weighted covariance ``sum_i w_i (g_i - gbar)(g_i - gbar)^T``."""
    vals = _evaluate_nodes(sigma, g)
    d = vals - sigma.weights @ vals
    cov = (d.T * sigma.weights) @ d
    return 0.5 * (cov + cov.T)


def _round_generator(seed, round_index):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), round_index])))


def sample(spec, n, seed, max_attempt_rounds=100_000):
    """Draw ``n`` samples as an ``(N_p, n)`` array.

    Round ``r`` of the generator produces one candidate per sample index from
    a counter-based Philox stream keyed on ``(seed, r)``; sample ``j`` keeps
    the first candidate that satisfies the constraint. Each sample therefore
    depends only on ``(seed, j)``, never on how the work is split.
    """
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    mu = np.asarray(spec.mean)
    root = spec.sqrt
    out = np.empty((spec.dim, n))
    pending = np.arange(n)
    attempts = accepted = 0
    for r in range(max_attempt_rounds):
        z = _round_generator(seed, r).standard_normal((n, spec.dim))
        cand = mu[:, None] + root @ z[pending].T
        ok = spec.feasible(cand)
        out[:, pending[ok]] = cand[:, ok]
        attempts += pending.size
        accepted += int(ok.sum())
        pending = pending[~ok]
        if pending.size == 0:
            return out
        if attempts >= 10_000 and accepted < 1e-4 * attempts:
            raise RejectionBudgetExceeded(
                f"acceptance rate {accepted / attempts:.2e} below 1e-4")
    raise RejectionBudgetExceeded(f"{pending.size} samples unresolved")


def standard_normal_cdf(x):
    """Standard normal distribution function, accurate in both tails."""
    x = np.asarray(x, dtype=float)
    # erfc keeps relative accuracy for the far-left tail
    out = 0.5 * erfc(-x / math.sqrt(2.0))
    return float(out) if out.ndim == 0 else out


# registry of named feasibility predicates referenced from config files
_CONSTRAINTS: dict[str, Callable[[np.ndarray], np.ndarray]] = {}


def register_constraint(name, predicate=None):
    """Register ``predicate`` under ``name``; usable as a decorator."""
    def deco(fn):
        _CONSTRAINTS[name] = fn
        return fn
    return deco if predicate is None else deco(predicate)


def get_constraint(name):
    try:
        return _CONSTRAINTS[name]
    except KeyError:
        raise UnknownName(f"no registered distribution constraint {name!r}") from None


@register_constraint("inertia")
def inertia_triangle_inequality(p):
    """Principal moments of a rigid body: positive and each <= sum of the others."""
    p = np.asarray(p, dtype=float)
    total = p.sum(axis=0)
    return np.all(p > 0, axis=0) & np.all(2.0 * p <= total, axis=0)
