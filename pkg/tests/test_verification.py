import math

import numpy as np
import pytest

from tychopt.dynamics import ControlSolution
from tychopt.errors import NotPSD
from tychopt.problems import builtin_problem
from tychopt.transcription import solve_ocp
from tychopt.verification import (
    MonteCarloReport,
    covariance_ellipse,
    default_epsilon_grid,
    default_workers,
    estimate_event_probability,
    feasibility_check,
    monte_carlo,
    risk_curve,
    svg_risk,
    svg_scatter,
)

CHI2_2_95 = -2.0 * math.log(0.05)  # 2-dof chi-square quantile in closed form


@pytest.fixture(scope="module")
def z0_control():
    return solve_ocp(builtin_problem("Z0"), nodes=30).control


def synthetic_report(Y, success=None, target=(0.0, 0.0)):
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    ok = np.ones(n, bool) if success is None else np.asarray(success)
    return MonteCarloReport(n=n, seed=0, output_names=("x", "y"), params=np.zeros((2, n)),
                            final_states=Y.T.copy(), all_endpoints=Y, success=ok,
                            mean=Y[ok].mean(axis=0), cov=np.cov(Y[ok].T),
                            target=np.asarray(target, float))


def test_ellipse_axes_and_angle():
    e = covariance_ellipse(np.diag([4.0, 1.0]), (1.0, 2.0), 0.95)
    np.testing.assert_allclose(e.semi_axes, [2 * math.sqrt(CHI2_2_95), math.sqrt(CHI2_2_95)])
    assert e.angle == 0.0
    R = np.array([[math.cos(0.4), -math.sin(0.4)], [math.sin(0.4), math.cos(0.4)]])
    e = covariance_ellipse(R @ np.diag([9.0, 1.0]) @ R.T, confidence=0.5)
    assert e.angle == pytest.approx(0.4, abs=1e-12)
    np.testing.assert_allclose(e.semi_axes, np.sqrt([9.0, 1.0]) * math.sqrt(-2 * math.log(0.5)))
    # circle: angle pinned to 0
    assert covariance_ellipse(np.eye(2)).angle == 0.0


def test_ellipse_coverage():
    rng = np.random.default_rng(0)
    C = np.array([[2.0, 0.6], [0.6, 0.5]])
    pts = np.linalg.cholesky(C) @ rng.normal(size=(2, 200_000))
    frac = covariance_ellipse(C, confidence=0.9).contains(pts).mean()
    assert frac == pytest.approx(0.9, abs=0.003)
    b = covariance_ellipse(C).boundary()
    assert covariance_ellipse(C).contains(0.999 * b).all()


def test_ellipse_rejects_bad_covariance():
    with pytest.raises(NotPSD):
        covariance_ellipse([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NotPSD):
        covariance_ellipse([[1.0, 0.2], [0.1, 1.0]])
    with pytest.raises(ValueError):
        covariance_ellipse(np.eye(2), confidence=1.0)


def test_risk_curve_oracle():
    Y = np.array([[0.1, 0.0], [0.0, 0.3], [0.4, 0.3], [2.0, 0.0]])
    rep = synthetic_report(Y)
    r = risk_curve(rep, (0.0, 0.0), [0.05, 0.2, 0.5, 3.0])
    np.testing.assert_allclose(r[:, 1], [1.0, 0.75, 0.25, 0.0])
    # a failed sample counts as a miss at every radius
    rep = synthetic_report(Y, success=[True, True, True, False])
    assert risk_curve(rep, (0.0, 0.0), [3.0])[0, 1] == 0.25
    grid = default_epsilon_grid()
    assert grid.size == 50 and grid[0] == pytest.approx(0.01) and grid[-1] == pytest.approx(2)


def test_event_probability():
    rep = synthetic_report(np.zeros((4, 2)))
    rep.final_states = np.array([[0.0, 1.0, 2.0, 3.0], [0.0, 0.0, 0.0, 0.0]])
    p, se = estimate_event_probability(rep, lambda xf, tf, prm: xf[0] <= 1.5)
    assert p == 0.5 and se == pytest.approx(0.25)


def test_monte_carlo_zermelo(z0_control):
    prob = builtin_problem("Z0")
    rep = monte_carlo(prob, z0_control, 400, seed=9)
    assert rep.n_ok == 400 and rep.excluded == 0
    assert rep.cov.shape == (2, 2) and rep.trace_cov > 0
    np.testing.assert_allclose(rep.standard_error, np.sqrt(np.diag(rep.cov) / 400))
    # r* is non-increasing in eps
    assert np.all(np.diff(rep.risk[:, 1]) <= 0)
    # worker count does not change results
    again = monte_carlo(prob, z0_control, 400, seed=9, workers=3)
    np.testing.assert_array_equal(again.all_endpoints, rep.all_endpoints)
    assert again.to_json() == rep.to_json()


def test_monte_carlo_single_sample_warns(z0_control):
    with pytest.warns(RuntimeWarning):
        rep = monte_carlo(builtin_problem("Z0"), z0_control, 1, seed=1)
    assert rep.cov is None and math.isnan(rep.trace_cov)


def test_report_round_trip(tmp_path, z0_control):
    rep = monte_carlo(builtin_problem("Z0"), z0_control, 50, seed=2)
    rep.to_json(tmp_path / "r.json")
    back = MonteCarloReport.from_json(tmp_path / "r.json")
    np.testing.assert_array_equal(back.all_endpoints, rep.all_endpoints)
    np.testing.assert_array_equal(back.cov, rep.cov)
    np.testing.assert_array_equal(back.target, rep.target)
    rep.samples_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "sample,ok,p1,p2,x,y" and len(lines) == 51


def test_feasibility_check(z0_control):
    prob = builtin_problem("Z0")
    good = feasibility_check(prob, z0_control)
    assert good.passed and good.terminal_miss <= 1e-3
    stretched = ControlSolution(z0_control.times * 1.2, z0_control.values)
    bad = feasibility_check(prob, stretched)
    assert not bad.passed and bad.endpoint_violation > 1e-3


def test_svg_output_is_deterministic():
    rep = synthetic_report(np.random.default_rng(1).normal(size=(30, 2)))
    rep.ellipses[(0, 1)] = covariance_ellipse(rep.cov, rep.mean)
    a, b = svg_scatter(rep), svg_scatter(rep)
    assert a == b and a.startswith("<svg") and "polyline" in a
    curve = risk_curve(rep, (0, 0))
    s = svg_risk([("base", curve), ("new", curve)])
    assert s.count("polyline") == 2 and ">new<" in s


def test_default_workers(monkeypatch):
    monkeypatch.setenv("TYCHOPT_WORKERS", "4")
    assert default_workers() == 4
    monkeypatch.setenv("TYCHOPT_WORKERS", "many")
    assert default_workers() == 1
