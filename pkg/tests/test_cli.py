import csv
import json

import pytest

from tychopt.cli import main
from tychopt.config import parse_config
from tychopt.pipeline import run_pipeline

SMALL = """
[problem]
family = zermelo
[transcription]
nodes = 20
[montecarlo]
n = 200
seed = 4
"""


@pytest.fixture()
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_solve_writes_artifacts(tmp_path, small_cfg, capsys):
    out = tmp_path / "z0"
    assert main(["solve", "--config", small_cfg, "--problem", "Z0", "--out", str(out)]) == 0
    res = json.loads((out / "result.json").read_text())
    assert res["status"] == "Converged" and 2.3 < res["tf"] < 2.6
    assert read_csv(out / "control.csv")[0] == ["t", "u1", "u2"]
    assert read_csv(out / "iterations.csv")[0][:2] == ["outer", "inner"]
    assert "Converged" in capsys.readouterr().out


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[solver]\nouter_tolerance = 1\n")
    assert main(["solve", "--config", str(bad)]) == 1
    assert "solver.outer_tolerance" in capsys.readouterr().err
    assert main(["solve", "--problem", "Z9"]) == 1


def test_solver_failure_exit_code(tmp_path):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(SMALL + "[solver]\nmax_outer = 1\n")
    assert main(["solve", "--config", str(cfg), "--problem", "Z1", "--out",
                 str(tmp_path / "o")]) == 2


def test_simulate_check_and_risk(tmp_path, small_cfg, capsys):
    sol = tmp_path / "z0"
    main(["solve", "--config", small_cfg, "--problem", "Z0", "--out", str(sol)])
    ctrl = str(sol / "control.csv")
    assert main(["simulate", "--config", small_cfg, "--problem", "Z0", ctrl,
                 "--out", str(tmp_path / "mc")]) == 0
    first = (tmp_path / "mc" / "report.json").read_bytes()
    main(["simulate", "--config", small_cfg, "--problem", "Z0", ctrl, "--workers", "2",
          "--out", str(tmp_path / "mc")])
    assert (tmp_path / "mc" / "report.json").read_bytes() == first
    assert (tmp_path / "mc" / "scatter_x_y.svg").exists()

    # one sample: covariance undefined, warning on stderr
    capsys.readouterr()
    assert main(["simulate", "--problem", "Z0", ctrl, "--n", "1",
                 "--out", str(tmp_path / "one")]) == 0
    assert "covariance omitted" in capsys.readouterr().err
    assert json.loads((tmp_path / "one" / "report.json").read_text())["cov"] is None

    assert main(["check", "--problem", "Z0", ctrl]) == 0
    assert main(["simulate", "--problem", "Z0", str(tmp_path / "missing.csv")]) == 1

    rep = str(tmp_path / "mc" / "report.json")
    assert main(["risk", rep, "--out", str(tmp_path / "r1")]) == 0
    rows = read_csv(tmp_path / "r1" / "risk.csv")
    assert "relative_reduction" not in rows[0] and len(rows) == 51
    assert main(["risk", rep, rep, "--eps-grid", "0.2", "--out", str(tmp_path / "r2")]) == 0
    rows = read_csv(tmp_path / "r2" / "risk.csv")
    assert rows[0][-1] == "relative_reduction" and len(rows) == 2
    assert float(rows[1][-1]) == 0.0
    assert main(["risk", rep, "--target", "0,0,0", "--out", str(tmp_path / "r3")]) == 1


def test_pipeline_stops_early_when_satisfied(tmp_path):
    cfg = parse_config(SMALL + "[pipeline]\nmean_miss_threshold = 1e9\n"
                       "trace_cov_threshold = 1e9\n")
    res = run_pipeline(cfg, str(tmp_path / "p"))
    assert res.stopped_after == 2 and res.satisfied
    assert not (tmp_path / "p" / "step3").exists()
    summary = read_csv(tmp_path / "p" / "summary.csv")
    assert [r[0] for r in summary[1:]] == ["1", "2"]
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert manifest["config_sha256"] == cfg.digest and manifest["stopped_after"] == 2


def test_pipeline_matches_single_commands(tmp_path, small_cfg):
    assert main(["pipeline", "--config", small_cfg, "--steps", "5",
                 "--out", str(tmp_path / "p")]) == 0
    p = tmp_path / "p"
    for k in (1, 2, 3, 4, 5):
        assert (p / f"step{k}").is_dir()
    assert json.loads((p / "step3" / "problem.json").read_text())["problem"] == "Z1"
    # step 1 == solve; step 2 == simulate; step 4 == solve warm-started from step 1
    main(["solve", "--config", small_cfg, "--problem", "Z0", "--out", str(tmp_path / "s1")])
    assert (tmp_path / "s1" / "control.csv").read_bytes() == (p / "step1" / "control.csv").read_bytes()
    main(["simulate", "--config", small_cfg, "--problem", "Z0", str(p / "step1" / "control.csv"),
          "--out", str(tmp_path / "s2")])
    assert (tmp_path / "s2" / "report.json").read_bytes() == (p / "step2" / "report.json").read_bytes()
    main(["solve", "--config", small_cfg, "--problem", "Z1", "--warm-start",
          str(p / "step1" / "control.csv"), "--out", str(tmp_path / "s4")])
    assert (tmp_path / "s4" / "control.csv").read_bytes() == (p / "step4" / "control.csv").read_bytes()
    rows = read_csv(p / "summary.csv")
    assert rows[0] == ["step", "name", "problem", "tf", "objective", "status", "mean_miss",
                       "trace_cov"]
    z1_mc = [r for r in rows if r[0] == "5"][0]
    assert float(z1_mc[6]) < 0.05
    assert (p / "risk_comparison.csv").exists() and (p / "ellipse_comparison.svg").exists()
    # rerun is byte-identical
    before = (p / "summary.csv").read_bytes()
    main(["pipeline", "--config", small_cfg, "--steps", "5", "--out", str(p)])
    assert (p / "summary.csv").read_bytes() == before


def test_cli_requires_verb():
    with pytest.raises(SystemExit):
        main([])
