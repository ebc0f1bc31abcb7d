import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tychopt.errors import InfeasibleSigmaPoint, NonPositiveScaling, NotPSD, UnknownName
from tychopt.uncertainty import (
    ConstrainedGaussianSpec,
    GaussianSpec,
    SigmaSet,
    cubature_covariance,
    cubature_expectation,
    get_constraint,
    sample,
    sigma_points,
    simplex_sigma_points,
    standard_normal_cdf,
    symmetric_sigma_points,
)


def random_spec(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    cov = a @ a.T + 0.1 * np.eye(n)
    cov = 0.5 * (cov + cov.T)
    return GaussianSpec(rng.normal(size=n), cov)


@pytest.mark.parametrize("scheme", ["symmetric", "simplex"])
@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_moment_matching(scheme, n):
    spec = random_spec(n, 10 + n)
    sig = sigma_points(spec, scheme)
    assert sig.size == (2 * n + 1 if scheme == "symmetric" else n + 2)
    assert abs(sig.weights.sum() - 1.0) <= 1e-12
    scale = 1.0 + np.abs(spec.covariance).max()
    np.testing.assert_allclose(sig.mean(), spec.mean, atol=1e-10 * scale)
    np.testing.assert_allclose(sig.covariance(), spec.covariance, atol=1e-10 * scale)


@pytest.mark.parametrize("scheme", ["symmetric", "simplex"])
def test_cubature_exact_for_quadratics(scheme):
    spec = random_spec(3, 5)
    sig = sigma_points(spec, scheme)
    mu, C = spec.mean, spec.covariance
    # constant, linear and every second-degree monomial
    assert cubature_expectation(sig, lambda p: 1.0)[0] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(cubature_expectation(sig, lambda p: p), mu, atol=1e-10)
    second = cubature_expectation(sig, lambda p: np.outer(p, p).ravel()).reshape(3, 3)
    np.testing.assert_allclose(second, C + np.outer(mu, mu), atol=1e-10)
    np.testing.assert_allclose(cubature_covariance(sig, lambda p: p), C, atol=1e-10)


def test_symmetric_weights_two_dimensional():
    sig = symmetric_sigma_points(GaussianSpec([0.0, 0.0], np.eye(2)))
    # kappa = 1, N + kappa = 3
    np.testing.assert_allclose(sig.weights, [1 / 3] + [1 / 6] * 4)
    np.testing.assert_allclose(np.abs(sig.points[:, 1:]).max(axis=0), np.sqrt(3.0))


def test_simplex_one_dimensional():
    sig = simplex_sigma_points(GaussianSpec([2.0], [[4.0]]))
    np.testing.assert_allclose(sig.weights, [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_allclose(np.sort(sig.points[0]), [2 - np.sqrt(6), 2, 2 + np.sqrt(6)])


def test_degenerate_covariance_collapses_to_mean():
    sig = symmetric_sigma_points(GaussianSpec([1.0, -1.0], np.zeros((2, 2))))
    np.testing.assert_allclose(sig.points, np.tile([[1.0], [-1.0]], (1, 5)))


def test_bad_inputs():
    with pytest.raises(NotPSD):
        GaussianSpec([0, 0], [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ValueError):
        GaussianSpec([0, 0], [[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(NonPositiveScaling):
        symmetric_sigma_points(GaussianSpec([0.0, 0.0], np.eye(2)), kappa=-2.0)
    with pytest.raises(NonPositiveScaling):
        simplex_sigma_points(GaussianSpec([0.0], [[1.0]]), w0=1.0)
    with pytest.raises(ValueError):
        sigma_points(GaussianSpec([0.0], [[1.0]]), "cubic")
    with pytest.raises(UnknownName):
        get_constraint("no-such-thing")


def test_point_rule():
    sig = SigmaSet.point([1.0, -1.0])
    assert sig.size == 1
    assert cubature_expectation(sig, lambda p: p[0] * p[1])[0] == -1.0


def test_sampling_reproducible_and_moments():
    spec = GaussianSpec([1.0, -1.0], np.diag([0.04, 0.01]))
    a = sample(spec, 20000, seed=3)
    b = sample(spec, 20000, seed=3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample(spec, 20000, seed=4))
    np.testing.assert_allclose(a.mean(axis=1), spec.mean, atol=0.005)
    np.testing.assert_allclose(np.cov(a), spec.covariance, atol=0.002)
    # prefix stability: sample j depends only on (seed, j)
    assert np.array_equal(sample(spec, 50, seed=3), a[:, :50])


def test_constrained_sampling_and_sigma_check():
    base = GaussianSpec.relative([36e3, 87e3, 94e3], 0.033)
    spec = ConstrainedGaussianSpec(base, get_constraint("inertia"), name="inertia")
    s = sample(spec, 500, seed=1)
    assert np.all(get_constraint("inertia")(s))
    sigma_points(spec)  # nominal sigma points are physical
    tight = ConstrainedGaussianSpec(GaussianSpec([1.0], [[1.0]]), lambda p: p[0] < 1.5)
    with pytest.raises(InfeasibleSigmaPoint):
        sigma_points(tight)


def test_inertia_predicate():
    pred = get_constraint("inertia")
    ok = pred(np.array([[1.0, 1.0, -1.0], [1.0, 1.0, 1.0], [1.0, 3.0, 1.0]]))
    assert ok.tolist() == [True, False, False]


def test_normal_cdf():
    assert standard_normal_cdf(0.0) == 0.5
    assert standard_normal_cdf(1.959963984540054) == pytest.approx(0.975, abs=1e-12)
    far = standard_normal_cdf(-30.0)
    assert 0 < far < 1e-190
    np.testing.assert_allclose(standard_normal_cdf(np.array([-1.0, 1.0])).sum(), 1.0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 10_000),
       scheme=st.sampled_from(["symmetric", "simplex"]))
def test_moment_matching_property(n, seed, scheme):
    spec = random_spec(n, seed)
    sig = sigma_points(spec, scheme)
    scale = 1.0 + np.abs(spec.covariance).max()
    assert np.allclose(sig.covariance(), spec.covariance, atol=1e-10 * scale)
    # permuting nodes leaves the rule unchanged
    perm = sig.permuted(np.random.default_rng(seed).permutation(sig.size))
    assert np.allclose(perm.covariance(), sig.covariance(), atol=1e-12 * scale)
