"""End-to-end acceptance checks.

Each test records one PASS/FAIL line (see ``conftest.py``) at the stated
tolerance, then asserts it. The Zermelo checks use the shipped
``configs/zermelo.cfg`` and the HST checks ``configs/hst.cfg``.
"""
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from tychopt.config import load_config
from tychopt.pipeline import solve_with_restarts
from tychopt.verification import (
    default_epsilon_grid,
    estimate_event_probability,
    feasibility_check,
    monte_carlo,
    risk_curve,
)

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIGS = os.path.join(HERE, os.pardir, "configs")


class Timed:
    def __init__(self, fn):
        t = time.perf_counter()
        self.value = fn()
        self.seconds = time.perf_counter() - t


@pytest.fixture(scope="module")
def zcfg():
    return load_config(os.path.join(CONFIGS, "zermelo.cfg"))


@pytest.fixture(scope="module")
def hcfg():
    return load_config(os.path.join(CONFIGS, "hst.cfg"))


def _solve(cfg, name, warm=None):
    prob = cfg.problem(name)
    guesses = cfg.tf_guesses if prob.final_time.free and name == "Z2" else ()
    return Timed(lambda: solve_with_restarts(prob, cfg.nodes, cfg.scheme, cfg.solver,
                                             warm, guesses))


def _mc(cfg, name, control, n=None):
    return Timed(lambda: monte_carlo(cfg.problem(name), control, n or cfg.mc_n,
                                     cfg.mc_seed, tol=cfg.mc_tol, workers=cfg.workers))


@pytest.fixture(scope="module")
def z0(zcfg):
    return _solve(zcfg, "Z0")


@pytest.fixture(scope="module")
def z0_mc(zcfg, z0):
    return _mc(zcfg, "Z0", z0.value.control)


@pytest.fixture(scope="module")
def z1(zcfg, z0):
    return _solve(zcfg, "Z1", z0.value.control)


@pytest.fixture(scope="module")
def z2(zcfg, z1):
    return _solve(zcfg, "Z2", z1.value.control)


@pytest.fixture(scope="module")
def z2_mc(zcfg, z2):
    return _mc(zcfg, "Z2", z2.value.control)


def test_z0_baseline(acceptance, zcfg, z0):
    sol = z0.value
    fc = feasibility_check(zcfg.problem("Z0"), sol.control)
    ok = (zcfg.nodes >= 50 and sol.result.converged and abs(sol.tf - 2.47) <= 0.03
          and fc.terminal_miss <= 1e-3 and z0.seconds <= 30)
    acceptance("Z0 baseline min-time", ok,
               f"tf={sol.tf:.4f} (2.47+/-0.03), miss={fc.terminal_miss:.2e} (<=1e-3), "
               f"nodes={zcfg.nodes}, {z0.seconds:.1f}s (<=30s)")
    assert ok


def test_z0_monte_carlo(acceptance, zcfg, z0_mc):
    rep = z0_mc.value
    target = np.asarray(zcfg.problem("Z0").target)
    hit, _ = estimate_event_probability(
        rep, lambda xf, tf, p: np.linalg.norm(xf - target[:, None], axis=0) == 0.0)
    dev = np.abs(rep.mean - [0.03, 0.02])
    ok = (rep.n == 1000 and np.all(dev <= 0.015) and hit == 0.0 and z0_mc.seconds <= 10)
    acceptance("Z0 Monte Carlo", ok,
               f"mean=({rep.mean[0]:.4f}, {rep.mean[1]:.4f}) vs (0.03, 0.02) +/-0.015, "
               f"Pr(exact hit)={hit}, n={rep.n}, {z0_mc.seconds:.1f}s (<=10s)")
    assert ok


def test_z1_mean_targeting(acceptance, zcfg, z1):
    sol = z1.value
    rep = _mc(zcfg, "Z1", sol.control, 1000).value
    se = rep.standard_error
    ok = (sol.result.converged and abs(sol.tf - 2.47) <= 0.25
          and np.all(np.abs(rep.mean) <= 3 * se))
    acceptance("Z1 mean targeting", ok,
               f"tf={sol.tf:.4f} (2.47+/-0.25), mean=({rep.mean[0]:.2e}, {rep.mean[1]:.2e}) "
               f"vs 3 SE=({3 * se[0]:.2e}, {3 * se[1]:.2e})")
    assert ok


@pytest.mark.slow
def test_z2_dispersion(acceptance, z0_mc, z2, z2_mc):
    sol = z2.value
    ratio = z2_mc.value.trace_cov / z0_mc.value.trace_cov
    ok = sol.result.converged and abs(sol.tf - 6.10) <= 0.6 and ratio <= 0.25
    acceptance("Z2 dispersion minimization", ok,
               f"status={sol.status}, tf={sol.tf:.3f} (6.10+/-0.6), trace ratio Z2/Z0="
               f"{ratio:.3f} (<=0.25), solve {z2.seconds:.0f}s")
    assert ok


@pytest.mark.slow
def test_risk_frontier(acceptance, zcfg, z0, z2):
    target = zcfg.problem("Z0").target
    t = time.perf_counter()
    r0 = _mc(zcfg, "Z0", z0.value.control).value
    r2 = _mc(zcfg, "Z2", z2.value.control).value
    c0, c2 = risk_curve(r0, target), risk_curve(r2, target)
    at0, at2 = risk_curve(r0, target, [0.2])[0, 1], risk_curve(r2, target, [0.2])[0, 1]
    seconds = time.perf_counter() - t
    monotone = bool(np.all(np.diff(c0[:, 1]) <= 0) and np.all(np.diff(c2[:, 1]) <= 0))
    reduction = (at0 - at2) / at0 if at0 > 0 else float("nan")
    ok = (monotone and reduction >= 0.6 and seconds <= 30
          and c0.shape[0] == default_epsilon_grid().size)
    acceptance("Risk frontier", ok,
               f"non-increasing={monotone}, r*(0.2): Z0={at0:.3f} Z2={at2:.3f}, "
               f"reduction={reduction:.1%} (>=60%), {seconds:.1f}s (<=30s)")
    assert ok


@pytest.mark.slow
def test_hst_property_suite(acceptance, hcfg):
    t = time.perf_counter()
    base = _solve(hcfg, "HST_baseline").value
    unsc = _solve(hcfg, "HST_unscented", base.control).value
    rb = _mc(hcfg, "HST_baseline", base.control).value
    ru = _mc(hcfg, "HST_baseline", unsc.control).value
    seconds = time.perf_counter() - t
    prob = hcfg.problem("HST_unscented")
    unit = np.asarray(prob.options["output_unit"])
    eb = (rb.mean - prob.target) / unit
    eu = (ru.mean - prob.target) / unit
    seb = rb.standard_error / unit
    vb = np.diag(rb.cov) / unit ** 2
    vu = np.diag(ru.cov) / unit ** 2
    relevant = np.abs(eb) > seb
    mean_ok = bool(np.all(np.abs(eu[relevant]) <= 0.2 * np.abs(eb[relevant])))
    var_ok = bool(np.all(vu <= 0.33 * vb))
    ok = (base.result.converged and unsc.result.converged and rb.n == 500
          and mean_ok and var_ok and seconds <= 20 * 60)
    names = prob.names_of_outputs()
    detail = ", ".join(f"{n}: err {a:.3g}/{b:.3g} var {c:.3g}/{d:.3g}"
                       for n, a, b, c, d in zip(names, eu, eb, vu, vb))
    acceptance("HST property suite", ok,
               f"status={unsc.status}, (a) mean errors={mean_ok}, (b) variances<=0.33x="
               f"{var_ok}, {seconds:.0f}s (<=1200s); unscented/baseline [{detail}]")
    assert ok


UNIT_SUITES = {
    "Sigma-point unit suite": [
        "test_uncertainty.py::test_moment_matching",
        "test_uncertainty.py::test_cubature_exact_for_quadratics",
    ],
    "Integrator suite": [
        "test_dynamics.py::test_rk4_fourth_order",
        "test_dynamics.py::test_rk45_oscillator_round_trip",
        "test_dynamics.py::test_hst_quaternion_norm_drift",
    ],
    "Euler-Maruyama contrast suite": [
        "test_dynamics.py::test_euler_maruyama_ou_stationary_variance",
        "test_dynamics.py::test_euler_maruyama_without_noise_is_explicit_euler",
    ],
    "Solver suite": [
        "test_nlp.py::test_equality_qp",
        "test_nlp.py::test_active_bounds",
        "test_nlp.py::test_rosenbrock_unconstrained",
        "test_nlp.py::test_rosenbrock_on_disk",
    ],
}


@pytest.mark.parametrize("suite", list(UNIT_SUITES))
def test_unit_suite(acceptance, suite):
    ids = [os.path.join(HERE, i) for i in UNIT_SUITES[suite]]
    run = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *ids],
                         capture_output=True, text=True)
    tail = run.stdout.strip().splitlines()[-1] if run.stdout.strip() else run.stderr[-200:]
    ok = run.returncode == 0
    acceptance(suite, ok, tail)
    assert ok, run.stdout
