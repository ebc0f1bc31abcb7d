import json

import numpy as np
import pytest

from tychopt.dynamics import ControlSolution
from tychopt.errors import InvalidBounds
from tychopt.nlp import fd_jacobian, gradient
from tychopt.problem import (
    Average,
    FinalTime,
    Minimax,
    NonlinearOfMean,
    PathConstraint,
    deterministic_instance,
    instantiate_unscented,
)
from tychopt.problems import builtin_problem
from tychopt.transcription import TranscribedNLP, extract_control, transcribe
from tychopt.uncertainty import SigmaSet, sigma_points


def perturbed(nlp, seed=0, size=1e-2):
    rng = np.random.default_rng(seed)
    z = nlp.x0 + size * rng.normal(size=nlp.n)
    return np.clip(z, nlp.lb, nlp.ub)


def fixed_z1(cost, tf=2.5):
    return builtin_problem("Z1").with_(cost=cost, final_time=FinalTime(fixed=tf))


COSTS = {
    "min_time": lambda: builtin_problem("Z1"),
    "trace_cov": lambda: builtin_problem("Z2"),
    "average": lambda: fixed_z1(Average(
        running=lambda x, u, t, p: x[0] ** 2 + 0.5 * u[0] * x[1] + 0.1 * t,
        terminal=lambda xf, tf, p: p[0] * xf[0] ** 2 + xf[1] * tf)),
    "minimax": lambda: fixed_z1(Minimax(lambda xf, tf, p: xf[0] ** 2 + xf[1] ** 2)),
    "nonlinear_of_mean": lambda: fixed_z1(NonlinearOfMean(
        lambda x0, xf, t0, tf, p: np.sum(xf ** 2, axis=0) + tf * p[0])),
}


@pytest.mark.parametrize("scheme", ["trapezoid", "hermite_simpson"])
@pytest.mark.parametrize("cost", sorted(COSTS))
def test_derivatives_match_differences(cost, scheme):
    nlp = transcribe(COSTS[cost](), nodes=6, scheme=scheme)
    z = perturbed(nlp)
    g = nlp.objective_gradient(z)
    g_fd = gradient(nlp.objective, z, method="fd")
    np.testing.assert_allclose(g, g_fd, atol=1e-6 * (1 + np.abs(g_fd).max()))
    J = nlp.jacobian(z).toarray()
    J_fd = fd_jacobian(nlp.constraints, z)
    np.testing.assert_allclose(J, J_fd, atol=1e-6 * (1 + np.abs(J_fd).max()))
    # every nonzero lies inside the declared sparsity pattern
    rows, cols = nlp.jacobian_structure()
    mask = np.zeros_like(J, dtype=bool)
    mask[rows, cols] = True
    assert np.all(np.abs(J_fd[~mask]) <= 1e-6 * (1 + np.abs(J_fd).max()))


def test_hst_derivatives_match_differences():
    nlp = transcribe(builtin_problem("HST_unscented"), nodes=5, scheme="hermite_simpson")
    z = perturbed(nlp, size=1e-3)
    J = nlp.jacobian(z).toarray()
    J_fd = fd_jacobian(nlp.constraints, z)
    np.testing.assert_allclose(J, J_fd, atol=1e-5 * (1 + np.abs(J_fd).max()))
    g_fd = gradient(nlp.objective, z, method="fd")
    np.testing.assert_allclose(nlp.objective_gradient(z), g_fd,
                               atol=1e-6 * (1 + np.abs(g_fd).max()))


def test_path_constraint_derivatives():
    prob = builtin_problem("Z1").with_(path=(PathConstraint(
        lambda x, u, t, p: np.stack([x[0] + x[1], x[1] * u[1]]), [-5.0, -1.0], [5.0, 1.0],
        mode="mean", name="box"),))
    nlp = transcribe(prob, nodes=6, scheme="hermite_simpson")
    z = perturbed(nlp)
    np.testing.assert_allclose(nlp.jacobian(z).toarray(), fd_jacobian(nlp.constraints, z),
                               atol=1e-6)
    assert nlp.rows["path"].stop - nlp.rows["path"].start == 2 * 6


@pytest.mark.parametrize("scheme", ["trapezoid", "hermite_simpson"])
def test_single_node_cubature_equals_baseline(scheme):
    # one cubature node at the mean turns the mean-target problem into the baseline
    z1 = builtin_problem("Z1")
    z0 = builtin_problem("Z0")
    a = TranscribedNLP(instantiate_unscented(z1, SigmaSet.point(z1.nominal)), 8, scheme)
    b = TranscribedNLP(deterministic_instance(z0), 8, scheme)
    np.testing.assert_array_equal(a.x0, b.x0)
    z = perturbed(a, seed=3)
    assert a.objective(z) == b.objective(z)
    np.testing.assert_array_equal(a.constraints(z), b.constraints(z))
    np.testing.assert_array_equal(a.objective_gradient(z), b.objective_gradient(z))


def test_sigma_order_does_not_matter():
    prob = builtin_problem("Z2")
    sig = sigma_points(prob.distribution)
    order = np.array([3, 0, 4, 2, 1])
    a = TranscribedNLP(instantiate_unscented(prob, sig), 8, tf_guess=3.0)
    b = TranscribedNLP(instantiate_unscented(prob, sig.permuted(order)), 8, tf_guess=3.0)
    Va = a.unpack(perturbed(a, seed=5))
    zb = b.pack(Va["X"][:, order], Va["U"], Va["Um"], Va["T"])
    za = a.pack(**{k: v for k, v in Va.items() if k != "Z"})
    assert b.objective(zb) == pytest.approx(a.objective(za), rel=1e-12)
    np.testing.assert_allclose(np.sort(b.constraints(zb)), np.sort(a.constraints(za)),
                               rtol=1e-12, atol=1e-14)


def test_trace_covariance_nonnegative_and_zero_when_coincident():
    prob = builtin_problem("Z2")
    nlp = transcribe(prob, nodes=6)
    for seed in range(5):
        assert nlp.objective(perturbed(nlp, seed=seed, size=0.3)) >= 0.0
    V = nlp.unpack(nlp.x0)
    X = V["X"].copy()
    X[:, :, -1] = X[:, :1, -1]  # every copy ends at the same point
    z = nlp.pack(X, V["U"], V["Um"], V["T"])
    assert nlp.objective(z) == pytest.approx(0.0, abs=1e-15)


def test_trapezoid_defects_are_second_order():
    prob = builtin_problem("Z0").with_(cost=Average(terminal=lambda xf, tf, p: xf[0] * 0),
                                       final_time=FinalTime(fixed=1.5))
    ctrl = ControlSolution(np.linspace(0, 1.5, 301), np.tile([-0.6, -0.8], (301, 1)))
    errs = []
    for n in (11, 21, 41):
        nlp = transcribe(prob, nodes=n, scheme="trapezoid", warm_start=ctrl)
        d = nlp.constraint_groups(nlp.x0)["defects"]
        errs.append(np.abs(d).max())
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_extract_control_angles_and_grid():
    prob = fixed_z1(Average(terminal=lambda xf, tf, p: xf[0] * 0), tf=1.0)
    nlp = transcribe(prob, nodes=11, scheme="trapezoid")
    V = nlp.unpack(nlp.x0)
    z = nlp.pack(V["X"], np.full_like(V["U"], np.pi), None, V["T"])
    c = extract_control(nlp, z)
    np.testing.assert_allclose(np.diff(c.times), 0.1, atol=1e-15)
    np.testing.assert_allclose(c.values, np.tile([-1.0, 0.0], (11, 1)), atol=1e-15)
    sol = transcribe(builtin_problem("Z0"), nodes=7)
    c = extract_control(sol, perturbed(sol, size=0.5), include_midpoints=True)
    assert c.times.size == 13
    np.testing.assert_allclose(np.hypot(c.values[:, 0], c.values[:, 1]), 1.0, atol=1e-12)


def test_dump_json_and_bounds(tmp_path):
    nlp = transcribe(builtin_problem("Z1"), nodes=6)
    doc = nlp.dump_json(nlp.x0, tmp_path / "nlp.json")
    back = json.loads((tmp_path / "nlp.json").read_text())
    assert back["n_variables"] == nlp.n == doc["n_variables"]
    assert set(back["rows"]) == {"defects", "endpoint", "path", "epigraph"}
    with pytest.raises(InvalidBounds):
        FinalTime(lower=2.0, upper=1.0)
    with pytest.raises(ValueError):
        transcribe(builtin_problem("Z0"), nodes=3)
    with pytest.raises(ValueError):
        transcribe(builtin_problem("Z0"), scheme="euler")
