"""The seven-step design procedure as a reproducible artifact pipeline.

Step 1 solves the deterministic baseline and checks it by re-propagation;
Step 2 runs a Monte Carlo analysis of that control; Steps 3-4 formulate and
solve the first unscented problem (warm-started from Step 1); Step 5
analyses it; Steps 6-7 formulate, solve and analyse the dispersion problem.
The run stops early once a Monte Carlo report meets the configured
satisfaction thresholds.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .problem import TraceCovariance
from .transcription import solve_ocp
from .uncertainty import sigma_points
from .verification import feasibility_check, monte_carlo, svg_risk, svg_scatter

__all__ = ["StepRecord", "PipelineResult", "run_pipeline", "solve_with_restarts",
           "write_solution", "write_report", "hst_table", "NumericalFailure"]


class NumericalFailure(RuntimeError):
    """A solve ended without convergence (CLI exit code 2)."""


@dataclass
class StepRecord:
    step: int
    name: str
    problem: str = ""
    tf: float = float("nan")
    objective: float = float("nan")
    status: str = ""
    mean_miss: float = float("nan")
    trace_cov: float = float("nan")
    directory: str = ""


@dataclass
class PipelineResult:
    records: list = field(default_factory=list)
    controls: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    stopped_after: int = 0
    satisfied: bool = False


def solve_with_restarts(problem, nodes, scheme, options, warm_start=None, tf_guesses=()):
    """Solve once per final-time guess (or once) and keep the best converged run.

    Ties and all-failed cases fall back to the lowest infeasibility.
    """
    guesses = tuple(tf_guesses) if (problem.final_time.free and tf_guesses) else (None,)
    best = None
    for g in guesses:
        sol = solve_ocp(problem, nodes=nodes, scheme=scheme, options=options,
                        warm_start=warm_start, tf_guess=g)
        key = (not sol.result.converged, sol.objective if sol.result.converged
               else sol.result.infeasibility)
        if best is None or key < best[0]:
            best = (key, sol)
    return best[1]


def write_solution(sol, directory, names=None):
    """Control CSV, result JSON and iteration log for a solved problem."""
    os.makedirs(directory, exist_ok=True)
    sol.control.to_csv(os.path.join(directory, "control.csv"), names)
    with open(os.path.join(directory, "result.json"), "w") as fh:
        json.dump(sol.summary(), fh, indent=1)
        fh.write("\n")
    sol.result.write_log(os.path.join(directory, "iterations.csv"))


def write_report(report, directory, stem="report"):
    """Report JSON, samples CSV and one scatter/ellipse SVG per output pair."""
    os.makedirs(directory, exist_ok=True)
    report.to_json(os.path.join(directory, f"{stem}.json"))
    report.samples_csv(os.path.join(directory, "samples.csv"))
    names = report.output_names or tuple(f"y{k + 1}" for k in range(report.mean.size))
    for (i, j) in report.ellipses:
        svg_scatter(report, i, j, os.path.join(directory, f"scatter_{names[i]}_{names[j]}.svg"))
    if report.risk is not None:
        _write_risk_csv(os.path.join(directory, "risk.csv"), [("r", report.risk)])


def _write_risk_csv(path, curves):
    eps = curves[0][1][:, 0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["epsilon"] + [f"r_{label}" for label, _ in curves]
        if len(curves) == 2:
            head.append("relative_reduction")
        w.writerow(head)
        for k, e in enumerate(eps):
            row = [repr(float(e))] + [repr(float(c[k, 1])) for _, c in curves]
            if len(curves) == 2:
                r0, r1 = curves[0][1][k, 1], curves[1][1][k, 1]
                row.append(repr(float((r0 - r1) / r0)) if r0 > 0 else "nan")
            w.writerow(row)


def _describe(problem, directory):
    """Record the formulated (not yet solved) problem of Steps 3 and 6."""
    os.makedirs(directory, exist_ok=True)
    doc = {"problem": problem.name, "cost": type(problem.cost).__name__,
           "final_time": "free" if problem.final_time.free else problem.final_time.fixed,
           "endpoint": [{"name": c.name, "mode": c.mode, "lower": c.lower.tolist(),
                         "upper": c.upper.tolist()} for c in problem.endpoint]}
    if not problem.deterministic:
        sig = sigma_points(problem.distribution, problem.sigma_scheme, problem.kappa)
        doc["sigma_points"] = sig.points.tolist()
        doc["weights"] = sig.weights.tolist()
    with open(os.path.join(directory, "problem.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _mean_miss(report, problem):
    if problem.target is None or report.mean.size != np.size(problem.target):
        return float("nan")
    return float(np.linalg.norm(report.mean - problem.target))


def _satisfied(record, config):
    return (record.mean_miss <= config.mean_miss_threshold
            and record.trace_cov <= config.trace_cov_threshold)


def hst_table(baseline, unscented, problem, path=None):
    """Table comparing baseline and unscented endpoint error statistics.

    Angles in arcsec, rates in arcsec/s; mean errors relative to the target
    outputs, variances in squared units.
    """
    unit = np.asarray(problem.options.get("output_unit", np.ones(baseline.mean.size)))
    target = np.asarray(problem.target)
    names = problem.names_of_outputs()
    rows = []
    for k, name in enumerate(names):
        rows.append({
            "output": name,
            "baseline_mean_error": float((baseline.mean[k] - target[k]) / unit[k]),
            "baseline_variance": float(baseline.cov[k, k] / unit[k] ** 2),
            "unscented_mean_error": float((unscented.mean[k] - target[k]) / unit[k]),
            "unscented_variance": float(unscented.cov[k, k] / unit[k] ** 2),
        })
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows


def run_pipeline(config, out_dir, steps=7, workers=None, log=None):
    """Run Steps 1..``steps`` of the procedure, writing artifacts under ``out_dir``.

    Raises :class:`NumericalFailure` if a solve fails to converge.
    """
    say = log or (lambda msg: None)
    os.makedirs(out_dir, exist_ok=True)
    names = config.problems
    base_name, first_name = names[0], names[1]
    second_name = names[2] if len(names) > 2 else None
    res = PipelineResult()
    opts = config.solver
    mc_kw = dict(n=config.mc_n, seed=config.mc_seed, tol=config.mc_tol,
                 workers=workers if workers is not None else config.workers,
                 confidence=config.confidence)

    def step_dir(k):
        return os.path.join(out_dir, f"step{k}")

    def solve_step(k, name, warm):
        prob = config.problem(name)
        guesses = config.tf_guesses if isinstance(prob.cost, TraceCovariance) else ()
        sol = solve_with_restarts(prob, config.nodes, config.scheme, opts, warm, guesses)
        write_solution(sol, step_dir(k), prob.field.control_names)
        rec = StepRecord(k, f"solve {name}", name, sol.tf, sol.objective, sol.status,
                         directory=step_dir(k))
        res.records.append(rec)
        res.controls[name] = sol.control
        say(f"step {k}: {name} {sol.status} tf={sol.tf:.6g} J={sol.objective:.6g}")
        if not sol.result.converged:
            raise NumericalFailure(f"step {k}: {name} ended with status {sol.status}")
        return prob, sol

    def mc_step(k, prob, name):
        report = monte_carlo(prob, res.controls[name], **mc_kw)
        write_report(report, step_dir(k))
        rec = StepRecord(k, f"monte carlo {name}", name, res.controls[name].tf,
                         mean_miss=_mean_miss(report, prob), trace_cov=report.trace_cov,
                         status="ok", directory=step_dir(k))
        res.records.append(rec)
        res.reports[name] = report
        say(f"step {k}: MC {name} mean miss={rec.mean_miss:.4g} trace cov={rec.trace_cov:.4g}")
        return rec

    try:
        prob0, sol0 = solve_step(1, base_name, None)
        fc = feasibility_check(prob0, sol0.control, config.feasibility_tolerance)
        with open(os.path.join(step_dir(1), "feasibility.json"), "w") as fh:
            json.dump(fc.to_dict(), fh, indent=1)
            fh.write("\n")
        res.stopped_after = 1
        if steps >= 2:
            rec = mc_step(2, prob0, base_name)
            res.stopped_after = 2
            if _satisfied(rec, config):
                res.satisfied = True
                return res
        if steps >= 3:
            _describe(config.problem(first_name), step_dir(3))
            res.records.append(StepRecord(3, f"formulate {first_name}", first_name,
                                          directory=step_dir(3)))
            res.stopped_after = 3
        if steps >= 4:
            solve_step(4, first_name, sol0.control)
            res.stopped_after = 4
        if steps >= 5:
            rec = mc_step(5, config.problem(first_name), first_name)
            res.stopped_after = 5
            if _satisfied(rec, config):
                res.satisfied = True
                return res
        if second_name is not None and steps >= 6:
            _describe(config.problem(second_name), step_dir(6))
            res.records.append(StepRecord(6, f"formulate {second_name}", second_name,
                                          directory=step_dir(6)))
            res.stopped_after = 6
        if second_name is not None and steps >= 7:
            prob2, _ = solve_step(7, second_name, res.controls[first_name])
            rec = mc_step(7, prob2, second_name)
            res.stopped_after = 7
            res.satisfied = _satisfied(rec, config)
        return res
    finally:
        _write_summary(res, config, out_dir)


def _write_summary(res, config, out_dir):
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "name", "problem", "tf", "objective", "status", "mean_miss",
                    "trace_cov"])
        for r in res.records:
            w.writerow([r.step, r.name, r.problem, repr(float(r.tf)), repr(float(r.objective)),
                        r.status, repr(float(r.mean_miss)), repr(float(r.trace_cov))])
    manifest = {"config_sha256": config.digest, "seed": config.mc_seed,
                "stopped_after": res.stopped_after, "satisfied": res.satisfied}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    names = config.problems
    reports = [(n, res.reports[n]) for n in names if n in res.reports]
    if len(reports) >= 2:
        base, last = reports[0], reports[-1]
        if base[1].risk is not None and last[1].risk is not None:
            curves = [(base[0], base[1].risk), (last[0], last[1].risk)]
            _write_risk_csv(os.path.join(out_dir, "risk_comparison.csv"), curves)
            svg_risk(curves, os.path.join(out_dir, "risk_comparison.svg"))
        if base[1].ellipses and (0, 1) in last[1].ellipses:
            svg_scatter(base[1], 0, 1, os.path.join(out_dir, "ellipse_comparison.svg"),
                        extra=[(last[1], "#2ca02c")])
        if config.family == "hst":
            hst_table(base[1], last[1], config.problem(names[1]),
                      os.path.join(out_dir, "table1.csv"))
