import csv
import json
import subprocess
import sys
import textwrap

import pytest

from feasiflow.cli import main


def run_cli(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_static_short(tmp_path, capsys):
    out = tmp_path / "out"
    code, stdout, _ = run_cli(
        ["run", "--scenario", "static9", "--horizon", "0.2", "--out-dir", str(out)], capsys
    )
    assert code == 0
    rows = read_csv(out / "trace.csv")
    header = rows[0]
    assert header[:4] == ["step", "time", "phi", "phi_gap"]
    assert header[4] == "residual_1" and header[33] == "residual_30"
    assert header[-1] == "consensus_inf_norm"
    assert len(rows) == 22  # header + steps 0..20
    report = json.loads((out / "report.json").read_text())
    assert report["oracle_cost"] == pytest.approx(27881.277777777843, rel=1e-9)
    assert report["max_violation"] <= 1e-6
    assert report["aux_scalars"] == 27
    assert report["steps"] == 20
    assert "final phi gap" in stdout


def test_run_static_outputs_deterministic(tmp_path, capsys):
    args = ["run", "--scenario", "static9", "--horizon", "0.1", "--variant", "sparse"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(args + ["--out-dir", str(a)], capsys)[0] == 0
    assert run_cli(args + ["--out-dir", str(b)], capsys)[0] == 0
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()


def test_run_cbf_centralized_short(tmp_path, capsys):
    out = tmp_path / "out"
    code, stdout, _ = run_cli(
        [
            "run",
            "--scenario",
            "formation9",
            "--mode",
            "centralized",
            "--horizon",
            "0.5",
            "--out-dir",
            str(out),
        ],
        capsys,
    )
    assert code == 0
    header = read_csv(out / "trace.csv")[0]
    for col in ("h_1", "h_2", "pointwise_cost", "p_1_x", "p_9_y"):
        assert col in header
    report = json.loads((out / "report.json").read_text())
    assert report["mode"] == "centralized"
    assert report["min_h"] >= -1e-6
    assert report["aux_scalars"] == 0
    assert "safety minima" in stdout


def test_run_cbf_nominal_violates(tmp_path, capsys):
    code, _, _ = run_cli(
        [
            "run",
            "--scenario",
            "formation9",
            "--mode",
            "nominal",
            "--horizon",
            "10",
            "--out-dir",
            str(tmp_path / "out"),
        ],
        capsys,
    )
    assert code == 4
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["min_h"] < -1e-6


def test_run_missing_scenario_exits_2(tmp_path, capsys):
    code, _, err = run_cli(
        ["run", "--scenario", str(tmp_path / "nope.yaml"), "--out-dir", str(tmp_path)], capsys
    )
    assert code == 2
    assert "invalid scenario" in err


def test_run_malformed_scenario_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(
        textwrap.dedent(
            """\
            kind: static_opt
            graph:
              nodes: 3
              edges: [[1, 2], [0, 3]]
            agents: oops
            """
        )
    )
    code, _, err = run_cli(["run", "--scenario", str(bad), "--out-dir", str(tmp_path)], capsys)
    assert code == 2
    assert "line 4: edge [0, 3] must join two distinct agents in 1..3" in err


def test_run_requires_convergence_exits_5(tmp_path, capsys):
    code, _, _ = run_cli(
        [
            "run",
            "--scenario",
            "static9",
            "--horizon",
            "0.05",
            "--tol-consensus",
            "1e-9",
            "--require-convergence",
            "--out-dir",
            str(tmp_path / "out"),
        ],
        capsys,
    )
    assert code == 5


def test_run_local_infeasibility_exits_3(tmp_path, capsys):
    # coupled problem is feasible, but agent 1 cannot satisfy its zero-column
    # row at the initial allocation, so the flow fails on the first solve
    scen = tmp_path / "scen.yaml"
    scen.write_text(
        textwrap.dedent(
            """\
            kind: static_opt
            graph:
              nodes: 2
              edges: [[1, 2]]
            agents:
              - {dim: 1, hessian: [[1.0]], coupling: [[0.0]], offsets: [1.0]}
              - {dim: 1, hessian: [[1.0]], coupling: [[-1.0]], offsets: [0.0]}
            """
        )
    )
    code, _, err = run_cli(
        ["run", "--scenario", str(scen), "--horizon", "0.1", "--out-dir", str(tmp_path / "out")],
        capsys,
    )
    assert code == 3
    assert "solver failure" in err


def test_run_infeasible_problem_exits_3(tmp_path, capsys):
    scen = tmp_path / "scen.yaml"
    scen.write_text(
        textwrap.dedent(
            """\
            kind: static_opt
            graph: {nodes: 1}
            agents:
              - {dim: 1, hessian: [[1.0]], coupling: [[1.0, -1.0]], offsets: [1.0, 1.0]}
            """
        )
    )
    code, _, err = run_cli(
        ["run", "--scenario", str(scen), "--out-dir", str(tmp_path / "out")], capsys
    )
    assert code == 3
    assert "infeasible" in err


def test_random_scenario_seed_gives_identical_traces(tmp_path, capsys):
    scen = tmp_path / "scen.yaml"
    scen.write_text(
        "kind: random_static\nseed: 7\nn_agents: 3\nconstraint_count: 2\n"
        "pattern: dense\nensure_local_rank: true\n"
    )
    args = ["run", "--scenario", str(scen), "--horizon", "0.2", "--seed", "7"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(args + ["--out-dir", str(a)], capsys)[0] == 0
    assert run_cli(args + ["--out-dir", str(b)], capsys)[0] == 0
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()


def test_diagnose_static9(capsys):
    code, out, _ = run_cli(["diagnose", "--scenario", "static9"], capsys)
    assert code == 0
    assert "connected: True" in out
    assert "rank condition per agent (dense): [False" in out
    assert "rank condition per agent (sparse): [True" in out
    assert "constraint consistency: all ok" in out
    assert "[0.106869, 9.35723]" in out
    assert "k0 >= 0.935723" in out


def test_diagnose_formation9(capsys):
    code, out, _ = run_cli(["diagnose", "--scenario", "formation9"], capsys)
    assert code == 0
    assert "barrier 1: h(0) = 21" in out
    assert "barrier 2: h(0) = 19" in out
    assert "[50, 50]" in out
    assert "k0 >= 0.002" in out


def test_diagnose_with_disturbance(capsys):
    code, out, _ = run_cli(
        ["diagnose", "--scenario", "formation9", "--d-bound", "1.0", "--eps", "0.1"], capsys
    )
    assert code == 0
    # (9 * 1 * sqrt(2) * 50 * |L|(~4.86) + 0.1) / 50
    assert "gain bound (D=1.0, eps=0.1)" in out


def test_diagnose_reports_dependent_directions(tmp_path, capsys):
    scen = tmp_path / "scen.yaml"
    scen.write_text(
        textwrap.dedent(
            """\
            kind: static_opt
            graph: {nodes: 1}
            agents:
              - {dim: 1, hessian: [[1.0]], coupling: [[1.0, 1.0]], offsets: [-1.0, -1.0]}
            """
        )
    )
    code, out, _ = run_cli(["diagnose", "--scenario", str(scen)], capsys)
    assert code == 0
    assert "gain bound unavailable" in out
    assert "linearly dependent" in out


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "feasiflow", "diagnose", "--scenario", "static9"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "scenario: static9" in proc.stdout
