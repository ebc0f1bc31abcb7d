"""Quaternion helpers for attitude outputs.

Quaternions are scalar-last, ``q = (q1, q2, q3, q4)`` with ``q4`` the scalar
part, matching the kinematics in :func:`tychopt.dynamics.hst_field`. Euler
angles use the aerospace 3-2-1 sequence: yaw ``psi`` about z, then pitch
``theta`` about the new y, then roll ``phi`` about the new x.
"""
from __future__ import annotations

import warnings

import numpy as np

from .errors import GimbalProximityWarning

__all__ = ["yaw_pitch_roll", "quaternion_from_euler", "quaternion_norm"]

_GIMBAL_TOL = 1e-6


def quaternion_norm(q):
    q = np.asarray(q, dtype=float)
    return np.sqrt(np.sum(q * q, axis=0))


def yaw_pitch_roll(q):
    """3-2-1 Euler angles ``(psi, theta, phi)`` in radians.

    Parameters
    ----------
    q : array_like, shape ``(4, ...)``
        Quaternion(s), renormalised before conversion.

    Returns
    -------
    ndarray, shape ``(3, ...)``

    Warns
    -----
    GimbalProximityWarning
        If the pitch is within ``1e-6`` rad of +/- 90 degrees, where yaw and
        roll are not separately defined.
    """
    q = np.asarray(q, dtype=float)
    norm = quaternion_norm(q)
    if np.any(norm <= 0):
        raise ValueError("quaternion must have positive norm")
    x, y, z, w = q / norm
    psi = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    s = np.clip(2.0 * (w * y - z * x), -1.0, 1.0)
    theta = np.arcsin(s)
    phi = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    if np.any(np.abs(np.abs(theta) - np.pi / 2) < _GIMBAL_TOL):
        warnings.warn("pitch within 1e-6 rad of +/-90 degrees; yaw and roll are coupled",
                      GimbalProximityWarning, stacklevel=2)
    return np.stack([psi, theta, phi])


def quaternion_from_euler(psi, theta, phi):
    """Scalar-last quaternion of the 3-2-1 rotation ``(psi, theta, phi)``."""
    cps, sps = np.cos(0.5 * np.asarray(psi)), np.sin(0.5 * np.asarray(psi))
    cth, sth = np.cos(0.5 * np.asarray(theta)), np.sin(0.5 * np.asarray(theta))
    cph, sph = np.cos(0.5 * np.asarray(phi)), np.sin(0.5 * np.asarray(phi))
    return np.stack([
        sph * cth * cps - cph * sth * sps,
        cph * sth * cps + sph * cth * sps,
        cph * cth * sps - sph * sth * cps,
        cph * cth * cps + sph * sth * sps,
    ])
