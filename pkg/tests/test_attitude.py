import warnings

import numpy as np
import pytest

from tychopt.attitude import quaternion_from_euler, quaternion_norm, yaw_pitch_roll
from tychopt.errors import GimbalProximityWarning
from tychopt.problems import HST_FINAL_QUATERNION


def test_identity():
    np.testing.assert_array_equal(yaw_pitch_roll([0.0, 0.0, 0.0, 1.0]), [0.0, 0.0, 0.0])


def test_slew_target_is_yaw_90_pitch_45():
    np.testing.assert_allclose(np.degrees(yaw_pitch_roll(HST_FINAL_QUATERNION)),
                               [90.0, 45.0, 0.0], atol=1e-12)
    assert quaternion_norm(HST_FINAL_QUATERNION) == pytest.approx(1.0, abs=1e-15)


def test_pure_rotations():
    # 30 degrees about body z is pure yaw
    q = np.array([0.0, 0.0, np.sin(np.pi / 12), np.cos(np.pi / 12)])
    np.testing.assert_allclose(yaw_pitch_roll(q), [np.pi / 6, 0.0, 0.0], atol=1e-15)
    q = np.array([np.sin(np.pi / 12), 0.0, 0.0, np.cos(np.pi / 12)])
    np.testing.assert_allclose(yaw_pitch_roll(q), [0.0, 0.0, np.pi / 6], atol=1e-15)


def test_round_trip_random_angles():
    rng = np.random.default_rng(4)
    psi = rng.uniform(-np.pi, np.pi, 200)
    theta = rng.uniform(-np.radians(80), np.radians(80), 200)
    phi = rng.uniform(-np.pi, np.pi, 200)
    q = quaternion_from_euler(psi, theta, phi)
    np.testing.assert_allclose(quaternion_norm(q), 1.0, atol=1e-15)
    np.testing.assert_allclose(yaw_pitch_roll(q), [psi, theta, phi], atol=1e-10)
    # sign and scale of the quaternion do not matter
    np.testing.assert_allclose(yaw_pitch_roll(-3.0 * q), [psi, theta, phi], atol=1e-10)


def test_gimbal_warning():
    q = quaternion_from_euler(0.3, np.pi / 2, 0.1)
    with pytest.warns(GimbalProximityWarning):
        yaw_pitch_roll(q)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        yaw_pitch_roll(quaternion_from_euler(0.3, 1.0, 0.1))


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError):
        yaw_pitch_roll(np.zeros(4))
