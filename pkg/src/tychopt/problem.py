"""Problem data: cost selectors, constraints and the tychastic problem container."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .dynamics import TychasticVectorField
from .errors import DimensionMismatch, InvalidBounds
from .uncertainty import ConstrainedGaussianSpec, GaussianSpec, SigmaSet

__all__ = [
    "MinTime",
    "Average",
    "Minimax",
    "TraceCovariance",
    "NonlinearOfMean",
    "EndpointConstraint",
    "PathConstraint",
    "FinalTime",
    "ControlSet",
    "Guess",
    "TychasticProblem",
    "EnsembleProblem",
    "instantiate_unscented",
    "deterministic_instance",
]


# -- cost selectors ---------------------------------------------------------


@dataclass(frozen=True)
class MinTime:
    """Minimise the final time."""


@dataclass(frozen=True)
class Average:
    """Weighted average over parameters of a Bolza cost.

    ``running(x, u, t, p)`` and ``terminal(xf, tf, p)`` return scalars per
    batch element; either may be omitted.
    """

    running: Optional[Callable] = None
    terminal: Optional[Callable] = None


@dataclass(frozen=True)
class Minimax:
    """Worst case over parameters of ``endpoint(xf, tf, p)``."""

    endpoint: Callable


@dataclass(frozen=True)
class TraceCovariance:
    """Trace of the covariance of ``output(xf)`` (default: the state)."""

    output: Optional[Callable] = None
    indices: Optional[Sequence[int]] = None

    def values(self, xf):
        g = xf if self.output is None else self.output(xf)
        if self.indices is not None:
            g = g[list(self.indices)]
        return g


@dataclass(frozen=True)
class NonlinearOfMean:
    """``fun(mean x0, mean xf, t0, tf, mean p)`` with parameter-averaged arguments.

    Vector arguments carry a trailing batch axis (shape ``(n, B)``) and ``fun``
    must return ``B`` values, e.g. reduce with ``sum(axis=0)``.
    """

    fun: Callable


CostSelector = Union[MinTime, Average, Minimax, TraceCovariance, NonlinearOfMean]


# -- constraints ------------------------------------------------------------


@dataclass(frozen=True)
class EndpointConstraint:
    """Bounds on ``fun(xf, tf, p)``.

    ``mode`` selects how the parameter enters:

    * ``"each"``: every parameter node must satisfy the bounds;
    * ``"mean"``: the weighted mean over nodes must;
    * ``"variance"``: the weighted variance of each row is bounded.
    """

    fun: Callable
    lower: np.ndarray
    upper: np.ndarray
    mode: str = "each"
    name: str = "endpoint"
    scale: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in ("each", "mean", "variance"):
            raise ValueError(f"unknown endpoint mode {self.mode!r}")
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(lo > hi):
            raise InvalidBounds(f"{self.name}: lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo.copy())
        object.__setattr__(self, "upper", hi.copy())

    @property
    def size(self):
        return self.lower.size


@dataclass(frozen=True)
class PathConstraint:
    """Bounds on ``fun(x, u, t, p)`` at every node (``mode`` "each" or "mean")."""

    fun: Callable
    lower: np.ndarray
    upper: np.ndarray
    mode: str = "each"
    name: str = "path"

    def __post_init__(self):
        if self.mode not in ("each", "mean"):
            raise ValueError(f"unknown path mode {self.mode!r}")
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(lo > hi):
            raise InvalidBounds(f"{self.name}: lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo.copy())
        object.__setattr__(self, "upper", hi.copy())

    @property
    def size(self):
        return self.lower.size


@dataclass(frozen=True)
class FinalTime:
    """Fixed (``fixed`` set) or free final time with bounds and a guess."""

    fixed: Optional[float] = None
    lower: float = 1e-3
    upper: float = np.inf
    guess: float = 1.0

    def __post_init__(self):
        if self.fixed is None and not self.lower < self.upper:
            raise InvalidBounds("final-time floor must be below the ceiling")
        if self.fixed is None and self.lower <= 0:
            raise InvalidBounds("final-time floor must be positive")

    @property
    def free(self):
        return self.fixed is None


@dataclass(frozen=True)
class ControlSet:
    """Box bounds on the control, or the unit circle ``u1^2 + u2^2 = 1``."""

    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    unit_circle: bool = False


@dataclass(frozen=True)
class Guess:
    """Initial-guess recipe: straight line towards ``target``, constant ``control``."""

    target: Optional[np.ndarray] = None
    control: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class TychasticProblem:
    """Optimal-control problem whose dynamics depend on an uncertain parameter.

    With ``deterministic=True`` the problem is solved at the distribution
    mean only (a baseline); the distribution is still used for Monte Carlo.
    """

    name: str
    field: TychasticVectorField
    distribution: Union[GaussianSpec, ConstrainedGaussianSpec]
    x0: np.ndarray
    cost: CostSelector
    final_time: FinalTime
    control: ControlSet = ControlSet()
    endpoint: tuple = ()
    path: tuple = ()
    t0: float = 0.0
    deterministic: bool = False
    guess: Guess = Guess()
    outputs: Optional[Callable] = None
    output_names: tuple = ()
    state_scale: Optional[np.ndarray] = None
    control_scale: Optional[np.ndarray] = None
    objective_scale: float = 1.0
    sigma_scheme: str = "symmetric"
    kappa: Optional[float] = None
    target: Optional[np.ndarray] = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        f = self.field
        if self.distribution.dim != f.n_p:
            raise DimensionMismatch(
                f"distribution has {self.distribution.dim} components, field expects {f.n_p}")
        if not callable(self.x0):
            x0 = np.asarray(self.x0, dtype=float)
            if x0.shape != (f.n_x,):
                raise DimensionMismatch(f"x0 has shape {x0.shape}, expected ({f.n_x},)")
        if self.control.unit_circle and f.n_u != 2:
            raise DimensionMismatch("unit-circle control needs a two-component control")
        if isinstance(self.cost, MinTime) and not self.final_time.free:
            raise ValueError("minimum-time cost needs a free final time")

    @property
    def nominal(self):
        return np.asarray(self.distribution.mean)

    def with_(self, **changes):
        return replace(self, **changes)

    def output_values(self, xf):
        """Output expressions at final states ``xf`` (``(N_x, ...)``)."""
        return np.asarray(xf) if self.outputs is None else self.outputs(xf)

    def names_of_outputs(self):
        if self.output_names:
            return tuple(self.output_names)
        if self.outputs is None and self.field.state_names:
            return tuple(self.field.state_names)
        return ()


@dataclass(frozen=True, eq=False)
class EnsembleProblem:
    """Deterministic ensemble: one state copy per cubature node, one shared control.

    Ensemble states have shape ``(N_x, N_sigma, ...)``.
    """

    problem: TychasticProblem
    sigma: SigmaSet

    @property
    def n_sigma(self):
        return self.sigma.size

    @property
    def n_x(self):
        return self.problem.field.n_x

    @property
    def n_u(self):
        return self.problem.field.n_u

    @property
    def state_dim(self):
        return self.n_sigma * self.n_x

    @property
    def weights(self):
        return self.sigma.weights

    @property
    def params(self):
        return self.sigma.points

    @property
    def x0(self):
        """Initial states per copy, ``(N_x, N_sigma)``; NaN marks a free entry."""
        x0 = self.problem.x0
        if callable(x0):
            return np.asarray(x0(self.params), dtype=float).reshape(self.n_x, self.n_sigma)
        return np.repeat(np.asarray(x0, dtype=float)[:, None], self.n_sigma, axis=1)

    def dynamics(self, X, u, t):
        """Stacked right-hand side ``(f(x_1, u, t; p_1), ..., f(x_n, u, t; p_n))``."""
        X = np.asarray(X, dtype=float)
        extra = X.ndim - 2
        p = self.params.reshape(self.params.shape + (1,) * extra)
        u = np.asarray(u, dtype=float)
        u = u.reshape((u.shape[0], 1) + u.shape[1:])
        return self.problem.field(X, u, t, p)


def instantiate_unscented(problem, sigma):
    """Replace the uncertain parameter by cubature nodes.

    The returned ensemble carries ``N_sigma`` copies of the state driven by a
    single control; endpoint and path constraints keep their per-node,
    mean or variance mode and are reduced with the node weights.
    """
    if sigma.dim != problem.field.n_p:
        raise DimensionMismatch(
            f"sigma points have dimension {sigma.dim}, field expects {problem.field.n_p}")
    return EnsembleProblem(problem, sigma)


def deterministic_instance(problem):
    """Baseline ensemble: a single node at the nominal parameter."""
    return instantiate_unscented(problem, SigmaSet.point(problem.nominal))
