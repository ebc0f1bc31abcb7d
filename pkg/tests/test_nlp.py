import numpy as np
import pytest

from tychopt.errors import NonFiniteEvaluation
from tychopt.nlp import NLP, SolverOptions, fd_jacobian, gradient, solve

# (inner method, dense_limit): dense_limit=0 forces the limited-memory variant
METHODS = [("lbfgsb", 1500), ("structured", 1500), ("structured", 0)]


def rosenbrock(x):
    return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2


def rosenbrock_grad(x):
    return np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2),
                     200 * (x[1] - x[0] ** 2)])


@pytest.mark.parametrize("method", METHODS)
def test_equality_qp(method):
    # min x^2 + 2 y^2 + z^2  s.t.  x + y + z = 1,  x - z = 0.2
    # stationarity: (2x, 4y, 2z) = l1 (1,1,1) + l2 (1,0,-1)
    A = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, -1.0]])
    b = np.array([1.0, 0.2])
    H = np.diag([2.0, 4.0, 2.0])
    K = np.block([[H, -A.T], [A, np.zeros((2, 2))]])
    exact = np.linalg.solve(K, np.concatenate([np.zeros(3), b]))[:3]
    prob = NLP(lambda x: 0.5 * x @ H @ x, np.zeros(3), constraints=lambda x: A @ x,
               cl=b, cu=b, objective_gradient=lambda x: H @ x, jacobian=lambda x: A)
    res = solve(prob, SolverOptions(inner_method=method[0], dense_limit=method[1]))
    assert res.converged
    np.testing.assert_allclose(res.x, exact, atol=1e-6)
    assert res.kkt <= 1e-5
    assert res.infeasibility <= 1e-6


@pytest.mark.parametrize("method", METHODS)
def test_active_bounds(method):
    # min (x-2)^2 + (y+1)^2 on [0,1]x[0,1] -> (1, 0)
    prob = NLP(lambda x: (x[0] - 2) ** 2 + (x[1] + 1) ** 2, [0.5, 0.5], lb=[0, 0], ub=[1, 1],
               objective_gradient=lambda x: np.array([2 * (x[0] - 2), 2 * (x[1] + 1)]))
    res = solve(prob, SolverOptions(inner_method=method[0], dense_limit=method[1]))
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 0.0], atol=1e-8)
    assert res.kkt <= 1e-5


@pytest.mark.parametrize("method", METHODS)
def test_active_inequality(method):
    # min x + y  s.t.  x^2 + y^2 <= 2  ->  (-1, -1)
    prob = NLP(lambda x: x[0] + x[1], [0.3, 0.1],
               constraints=lambda x: np.array([x @ x]), cu=[2.0],
               objective_gradient=lambda x: np.ones(2),
               jacobian=lambda x: 2 * x[None, :])
    res = solve(prob, SolverOptions(inner_method=method[0], dense_limit=method[1]))
    assert res.converged
    np.testing.assert_allclose(res.x, [-1.0, -1.0], atol=1e-5)
    assert res.multipliers[0] == pytest.approx(0.5, abs=1e-4)
    assert res.kkt <= 1e-5


def test_rosenbrock_unconstrained():
    prob = NLP(rosenbrock, [-1.2, 1.0], objective_gradient=rosenbrock_grad)
    res = solve(prob)
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-5)
    assert res.kkt <= 1e-5


@pytest.mark.parametrize("method", METHODS)
def test_rosenbrock_on_disk(method):
    # the unconstrained optimum (1, 1) lies outside the disk x^2 + y^2 <= 1.5, so the
    # constraint is active; reference point from an independent SLSQP run
    prob = NLP(rosenbrock, [0.0, 0.0], constraints=lambda x: np.array([x @ x]), cu=[1.5],
               objective_gradient=rosenbrock_grad, jacobian=lambda x: 2 * x[None, :])
    res = solve(prob, SolverOptions(inner_method=method[0], dense_limit=method[1]))
    assert res.converged
    x = res.x
    assert x @ x == pytest.approx(1.5, abs=1e-6)
    # gradient parallel to the outward normal, pointing inward
    g = rosenbrock_grad(x)
    lam = -(g @ x) / (2 * x @ x)
    np.testing.assert_allclose(g + 2 * lam * x, 0.0, atol=1e-5)
    assert lam > 0
    np.testing.assert_allclose(x, [0.907234, 0.822755], atol=1e-5)
    assert res.kkt <= 1e-5


def test_log_is_monotone_in_infeasibility(tmp_path):
    prob = NLP(rosenbrock, [0.0, 0.0], constraints=lambda x: np.array([x[0] + x[1]]),
               cl=[0.5], cu=[0.5], objective_gradient=rosenbrock_grad)
    res = solve(prob)
    infeas = [row["infeas"] for row in res.log]
    assert all(b <= a for a, b in zip(infeas, infeas[1:]))
    path = tmp_path / "log.csv"
    res.write_log(path)
    assert path.read_text().splitlines()[0] == "outer,inner,f,infeas,rho,grad_norm"


def test_infeasible_problem_does_not_converge():
    prob = NLP(lambda x: x[0] ** 2, [0.0], constraints=lambda x: np.array([x[0], x[0]]),
               cl=[1.0, -1.0], cu=[1.0, -1.0])
    res = solve(prob, SolverOptions(max_outer=15))
    assert not res.converged
    assert res.status in ("Stalled", "MaxIter")


def test_non_finite_objective_raises():
    prob = NLP(lambda x: np.nan, [0.0])
    with pytest.raises(NonFiniteEvaluation):
        solve(prob)


def test_differences():
    x = np.array([0.3, -0.4])
    np.testing.assert_allclose(gradient(rosenbrock, x, method="fd"), rosenbrock_grad(x),
                               rtol=1e-6)
    J = fd_jacobian(lambda v: np.array([v[0] * v[1], np.sin(v[0])]), x)
    np.testing.assert_allclose(J, [[x[1], x[0]], [np.cos(x[0]), 0.0]], atol=1e-8)


def test_options_validated():
    with pytest.raises(ValueError):
        SolverOptions(inner_method="newton")
    with pytest.raises(ValueError):
        SolverOptions(outer_tol=0.0)
