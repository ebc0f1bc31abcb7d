"""Command-line driver: ``tychopt solve|simulate|risk|pipeline|check``.

Exit codes: 0 success, 1 user or configuration error, 2 numerical failure
(a solve that stalls or hits its iteration limit).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np

from .config import FAMILIES, default_config, load_config
from .dynamics import ControlSolution
from .errors import ConfigError, TychoptError, UnknownName
from .pipeline import (NumericalFailure, _write_risk_csv, run_pipeline, solve_with_restarts,
                       write_report, write_solution)
from .problem import TraceCovariance
from .verification import (MonteCarloReport, feasibility_check, monte_carlo, risk_curve,
                           svg_risk)

__all__ = ["main", "build_parser"]

OK, USER_ERROR, NUMERICAL_FAILURE = 0, 1, 2


def _env_workers():
    raw = os.environ.get("TYCHOPT_WORKERS")
    try:
        return int(raw) if raw else None
    except ValueError:
        return None


def build_parser():
    ap = argparse.ArgumentParser(prog="tychopt", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, problem=True):
        p.add_argument("--config", help="configuration file (defaults: built-in problem data)")
        if problem:
            p.add_argument("--problem", default="Z0",
                           help="built-in problem name (Z0, Z1, Z2, HST_baseline, HST_unscented)")

    p = sub.add_parser("solve", help="solve one trajectory optimization problem")
    common(p)
    p.add_argument("--nodes", type=int)
    p.add_argument("--scheme", choices=("hermite_simpson", "trapezoid"))
    p.add_argument("--warm-start", help="control CSV used as initial guess")
    p.add_argument("--out", default="solve_out")

    p = sub.add_parser("simulate", help="Monte Carlo analysis of a control")
    common(p)
    p.add_argument("control", help="control CSV written by 'solve'")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=_env_workers())
    p.add_argument("--out", default="simulate_out")

    p = sub.add_parser("risk", help="risk table r*(eps) from one or two Monte Carlo reports")
    p.add_argument("reports", nargs="+", help="report JSON (baseline first)")
    p.add_argument("--target", help="comma-separated target (default: stored in report)")
    p.add_argument("--eps-grid", help="comma-separated eps values (default: 50-point log grid)")
    p.add_argument("--out", default="risk_out")

    p = sub.add_parser("pipeline", help="run the seven-step procedure")
    common(p, problem=False)
    p.add_argument("--family", choices=sorted(FAMILIES), default=None)
    p.add_argument("--steps", type=int, default=7, choices=range(1, 8), metavar="1..7")
    p.add_argument("--workers", type=int, default=_env_workers())
    p.add_argument("--out", default="pipeline_out")

    p = sub.add_parser("check", help="re-propagate a control and check the constraints")
    common(p)
    p.add_argument("control")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--out", help="write the report JSON here (default: stdout only)")
    return ap


def _config(args, family=None):
    if args.config:
        return load_config(args.config)
    if family is None:
        name = getattr(args, "problem", "Z0")
        family = next((f for f, names in FAMILIES.items() if name in names), None)
        if family is None:
            raise UnknownName(f"unknown problem {name!r}")
    return default_config(family)


def _floats(text, what):
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers", what) from None


def _read_control(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"control file not found: {path}")
    return ControlSolution.from_csv(path)


def cmd_solve(args):
    cfg = _config(args)
    prob = cfg.problem(args.problem)
    warm = _read_control(args.warm_start) if args.warm_start else None
    guesses = cfg.tf_guesses if isinstance(prob.cost, TraceCovariance) else ()
    sol = solve_with_restarts(prob, args.nodes or cfg.nodes, args.scheme or cfg.scheme,
                              cfg.solver, warm, guesses)
    write_solution(sol, args.out, prob.field.control_names)
    print(f"{prob.name}: {sol.status} tf={sol.tf:.6g} objective={sol.objective:.6g} "
          f"infeasibility={sol.result.infeasibility:.3g} -> {args.out}")
    return OK if sol.result.converged else NUMERICAL_FAILURE


def cmd_simulate(args):
    cfg = _config(args)
    prob = cfg.problem(args.problem)
    control = _read_control(args.control)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = monte_carlo(prob, control, args.n or cfg.mc_n,
                             cfg.mc_seed if args.seed is None else args.seed, tol=cfg.mc_tol,
                             workers=args.workers if args.workers is not None else cfg.workers,
                             confidence=cfg.confidence)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_report(report, args.out)
    print(f"{prob.name}: n={report.n} ok={report.n_ok} mean={np.array2string(report.mean)} "
          f"trace_cov={report.trace_cov:.6g} -> {args.out}")
    return OK


def cmd_risk(args):
    if len(args.reports) > 2:
        raise ConfigError("risk: give one or two reports", "reports")
    reports = []
    for path in args.reports:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"report not found: {path}")
        reports.append(MonteCarloReport.from_json(path))
    eps = _floats(args.eps_grid, "eps-grid") if args.eps_grid else None
    curves = []
    for path, rep in zip(args.reports, reports):
        target = _floats(args.target, "target") if args.target else rep.target
        if target is None:
            raise ConfigError("risk: report has no target; pass --target", "target")
        if np.size(target) != rep.all_endpoints.shape[1]:
            raise ConfigError(f"risk: target has {np.size(target)} components, report outputs "
                              f"have {rep.all_endpoints.shape[1]}", "target")
        label = os.path.splitext(os.path.basename(os.path.dirname(os.path.abspath(path))))[0]
        curves.append((label if label not in [c[0] for c in curves] else f"r{len(curves)}",
                       risk_curve(rep, target, eps)))
    os.makedirs(args.out, exist_ok=True)
    _write_risk_csv(os.path.join(args.out, "risk.csv"), curves)
    svg_risk(curves, os.path.join(args.out, "risk.svg"))
    if len(curves) == 2 and eps is None:
        e = curves[0][1][:, 0]
        k = int(np.argmin(np.abs(e - 0.2)))
        r0, r1 = curves[0][1][k, 1], curves[1][1][k, 1]
        if r0 > 0:
            print(f"eps={e[k]:.3g}: r0={r0:.3f} r1={r1:.3f} reduction={(r0 - r1) / r0:.1%}")
    print(f"risk table -> {args.out}")
    return OK


def cmd_pipeline(args):
    cfg = _config(args, family=args.family or "zermelo")
    if args.family and args.config and args.family != cfg.family:
        raise ConfigError(f"--family {args.family} conflicts with the configuration's "
                          f"family {cfg.family}", "problem.family")
    res = run_pipeline(cfg, args.out, steps=args.steps, workers=args.workers,
                       log=lambda msg: print(msg, flush=True))
    state = "satisfied" if res.satisfied else "not satisfied"
    print(f"pipeline stopped after step {res.stopped_after} ({state}) -> {args.out}")
    return OK


def cmd_check(args):
    cfg = _config(args)
    prob = cfg.problem(args.problem)
    control = _read_control(args.control)
    rep = feasibility_check(prob, control, args.tolerance or cfg.feasibility_tolerance)
    text = json.dumps(rep.to_dict(), indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return OK if rep.passed else NUMERICAL_FAILURE


_COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "risk": cmd_risk,
             "pipeline": cmd_pipeline, "check": cmd_check}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NUMERICAL_FAILURE
    except (ConfigError, UnknownName, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USER_ERROR
    except TychoptError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return NUMERICAL_FAILURE


if __name__ == "__main__":
    sys.exit(main())
