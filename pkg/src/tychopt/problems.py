"""Built-in problems: the Zermelo family and the telescope slew."""
from __future__ import annotations

import numpy as np

from .attitude import quaternion_from_euler, yaw_pitch_roll
from .dynamics import hst_field, zermelo_field
from .errors import UnknownName
from .problem import (
    Average,
    ControlSet,
    EndpointConstraint,
    FinalTime,
    Guess,
    MinTime,
    TraceCovariance,
    TychasticProblem,
)
from .uncertainty import ConstrainedGaussianSpec, GaussianSpec, get_constraint

__all__ = [
    "builtin_problem",
    "BUILTIN_NAMES",
    "zermelo_distribution",
    "hst_distribution",
    "hst_outputs",
    "HST_FINAL_QUATERNION",
    "ARCSEC",
    "TABLE1_UNSCENTED_VARIANCE",
]

BUILTIN_NAMES = ("Z0", "Z1", "Z2", "HST_baseline", "HST_unscented")

ZERMELO_X0 = np.array([2.25, 1.0])
ZERMELO_TARGET = np.zeros(2)

ARCSEC = np.pi / (180.0 * 3600.0)
HST_INERTIA = np.array([36e3, 87e3, 94e3])
HST_RELATIVE_SIGMA = 0.033
HST_X0 = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
# yaw 90 deg, pitch 45 deg, roll 0, at rest
HST_FINAL_QUATERNION = quaternion_from_euler(np.pi / 2, np.pi / 4, 0.0)
HST_TF = 1200.0
HST_TORQUE = 1.0
HST_OUTPUT_NAMES = ("psi", "theta", "phi", "omega1", "omega2", "omega3")
# (psi, theta, phi) in arcsec^2, (omega1, omega2, omega3) in (arcsec/s)^2
TABLE1_UNSCENTED_VARIANCE = np.array([1436.0, 153.0, 619.0, 0.341, 0.932, 0.130])


def zermelo_distribution():
    """Wind parameters ``(p, q) ~ N((1, -1), diag(0.2^2, 0.1^2))``."""
    return GaussianSpec.diagonal([1.0, -1.0], [0.2, 0.1])


def hst_distribution():
    """Principal inertias with 3.3 % relative 1-sigma, restricted to physical bodies."""
    base = GaussianSpec.relative(HST_INERTIA, HST_RELATIVE_SIGMA)
    return ConstrainedGaussianSpec(base, get_constraint("inertia"), name="inertia")


def hst_outputs(x):
    """Endpoint outputs ``(psi, theta, phi, w1, w2, w3)`` of state(s) ``x``."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([yaw_pitch_roll(x[:4]), x[4:7]], axis=0)


def _zermelo_endpoint(xf, tf, p):
    return xf


def _zermelo(name, x0=None, target=None, distribution=None, tf_lower=0.1, tf_upper=50.0,
             tf_guess=None):
    x0 = ZERMELO_X0 if x0 is None else np.asarray(x0, dtype=float)
    target = ZERMELO_TARGET if target is None else np.asarray(target, dtype=float)
    dist = zermelo_distribution() if distribution is None else distribution
    heading = target - x0
    common = dict(
        field=zermelo_field(),
        distribution=dist,
        x0=x0,
        control=ControlSet(unit_circle=True),
        guess=Guess(target=target, control=heading / max(np.linalg.norm(heading), 1e-12)),
        target=target,
        output_names=("x", "y"),
    )
    # straight-line distance over unit speed
    dist_guess = max(float(np.linalg.norm(heading)), 2 * tf_lower)
    if name == "Z0":
        return TychasticProblem(
            name="Z0", cost=MinTime(), deterministic=True,
            final_time=FinalTime(lower=tf_lower, upper=tf_upper, guess=tf_guess or dist_guess),
            endpoint=(EndpointConstraint(_zermelo_endpoint, target, target,
                                         mode="each", name="target"),),
            **common)
    mean_target = EndpointConstraint(_zermelo_endpoint, target, target,
                                     mode="mean", name="mean_target")
    if name == "Z1":
        return TychasticProblem(
            name="Z1", cost=MinTime(),
            final_time=FinalTime(lower=tf_lower, upper=tf_upper, guess=tf_guess or dist_guess),
            endpoint=(mean_target,), **common)
    return TychasticProblem(
        name="Z2", cost=TraceCovariance(),
        final_time=FinalTime(lower=tf_lower, upper=tf_upper, guess=tf_guess or 6.0),
        endpoint=(mean_target,), **common)


def _hst_endpoint(xf, tf, p):
    return hst_outputs(xf)


def _hst(name, variance_bounds=None, tf=HST_TF, torque=HST_TORQUE, gyroscopic="paper"):
    target = hst_outputs(np.concatenate([HST_FINAL_QUATERNION, np.zeros(3)]))
    unit = np.array([ARCSEC] * 3 + [ARCSEC] * 3)
    effort = Average(running=lambda x, u, t, p: np.sum(np.asarray(u) ** 2, axis=0)
                     + 0.0 * x[0])
    common = dict(
        field=hst_field(gyroscopic),
        distribution=hst_distribution(),
        x0=HST_X0,
        cost=effort,
        final_time=FinalTime(fixed=tf),
        control=ControlSet(lower=-torque * np.ones(3), upper=torque * np.ones(3)),
        guess=Guess(target=np.concatenate([HST_FINAL_QUATERNION, np.zeros(3)]),
                    control=np.zeros(3)),
        outputs=hst_outputs,
        output_names=HST_OUTPUT_NAMES,
        target=target,
        state_scale=np.array([1.0, 1.0, 1.0, 1.0, 1e-3, 1e-3, 1e-3]),
        control_scale=torque * np.ones(3),
        objective_scale=torque ** 2 * tf,
        options={"output_unit": unit},
    )
    if name == "HST_baseline":
        return TychasticProblem(
            name="HST_baseline", deterministic=True,
            endpoint=(EndpointConstraint(_hst_endpoint, target, target, mode="each",
                                         name="target"),),
            **common)
    var = (TABLE1_UNSCENTED_VARIANCE if variance_bounds is None
           else np.asarray(variance_bounds, dtype=float))
    var_rad = var * unit ** 2
    return TychasticProblem(
        name="HST_unscented",
        endpoint=(
            EndpointConstraint(_hst_endpoint, target, target, mode="mean", name="mean_target"),
            EndpointConstraint(_hst_endpoint, np.zeros(6), var_rad, mode="variance",
                               name="variance"),
        ),
        **common)


def builtin_problem(name, **overrides):
    """Problem data for ``Z0``, ``Z1``, ``Z2``, ``HST_baseline`` or ``HST_unscented``.

    Zermelo problems accept ``x0``, ``target``, ``distribution``,
    ``tf_lower``, ``tf_upper`` and ``tf_guess``; HST problems accept
    ``variance_bounds`` (arcsec^2 and (arcsec/s)^2, order
    psi, theta, phi, w1, w2, w3), ``tf``, ``torque`` and ``gyroscopic``.
    """
    if name in ("Z0", "Z1", "Z2"):
        return _zermelo(name, **overrides)
    if name in ("HST_baseline", "HST_unscented"):
        return _hst(name, **overrides)
    raise UnknownName(f"unknown builtin problem {name!r}; choose from {BUILTIN_NAMES}")
