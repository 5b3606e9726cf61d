"""Command-line entry points: run experiments, export traces, diagnose setups.

Exit codes: 0 clean run, 2 scenario parse or validation failure, 3 solver
failure (infeasible or unbounded subproblem), 4 constraint or safety
violation detected in the produced trace, 5 no multiplier consensus within
the horizon when --require-convergence is set.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .cbf import CbfStepError, simulate
from .flows import (
    FlowParams,
    FlowStepError,
    GainBoundError,
    InconsistentPatternError,
    gain_bound,
    multiplier_sensitivity_bounds,
    run_flow,
)
from .localqp import LocalInfeasibleError, UnboundedLocalError
from .network import check_consistency
from .problem import CentralizedSolveError, centralized_solve, slater_rank_flag
from .scenario_io import ScenarioError, load_scenario

EXIT_OK = 0
EXIT_SCENARIO = 2
EXIT_SOLVER = 3
EXIT_VIOLATION = 4
EXIT_NO_CONVERGENCE = 5

VIOLATION_TOL = 1e-6


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _convergence_step(consensus: np.ndarray, tol: float) -> int | None:
    hits = np.flatnonzero(consensus <= tol)
    return int(hits[0]) if hits.size else None


def _merged_params(defaults: dict, args, fallback: FlowParams) -> FlowParams:
    merged = {
        "k0": fallback.k0,
        "dt": fallback.dt,
        "horizon": fallback.horizon,
        "variant": fallback.variant,
        "sat_band": fallback.sat_band,
        "sat_slope": fallback.sat_slope,
    }
    merged.update(defaults)
    for key, flag in (
        ("k0", args.k0),
        ("dt", args.dt),
        ("horizon", args.horizon),
        ("variant", args.variant),
        ("sat_band", args.sat_band),
        ("sat_slope", args.sat_slope),
    ):
        if flag is not None:
            merged[key] = flag
    return FlowParams(**merged)


def _run_static(loaded, args, out_dir: Path) -> int:
    problem = loaded.problem
    params = _merged_params(loaded.flow_defaults, args, FlowParams(horizon=20.0))
    started = time.perf_counter()
    x_star, cost_star, _ = centralized_solve(problem)
    trace = run_flow(problem, params)
    wall = time.perf_counter() - started

    m_count = problem.constraint_count
    header = ["step", "time", "phi", "phi_gap"]
    header += [f"residual_{m}" for m in range(1, m_count + 1)]
    header += ["consensus_inf_norm"]
    rows = []
    for k in range(trace.record_count):
        row = [
            str(int(trace.steps[k])),
            _fmt(trace.times[k]),
            _fmt(trace.phi[k]),
            _fmt(trace.phi[k] - cost_star),
        ]
        row += [_fmt(v) for v in trace.residuals[k]]
        row.append(_fmt(trace.consensus[k]))
        rows.append(row)
    _write_csv(out_dir / "trace.csv", header, rows)

    max_violation = float(trace.residuals.max())
    convergence = _convergence_step(trace.consensus, args.tol_consensus)
    final_gap = float(trace.phi[-1] - cost_star)
    report = {
        "scenario": loaded.name,
        "kind": "static",
        "variant": params.variant,
        "k0": params.k0,
        "dt": params.dt,
        "horizon": params.horizon,
        "steps": trace.record_count - 1,
        "wall_time_s": wall,
        "oracle_cost": cost_star,
        "final_phi": float(trace.phi[-1]),
        "final_phi_gap": final_gap,
        "final_rel_gap": final_gap / max(1.0, abs(cost_star)),
        "max_violation": max_violation,
        "final_consensus": float(trace.consensus[-1]),
        "convergence_step": convergence,
        "tol_consensus": args.tol_consensus,
        "aux_scalars": trace.aux_scalars,
        "early_stop_step": trace.early_stop_step,
    }
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(f"wrote {out_dir / 'trace.csv'} and {out_dir / 'report.json'}")
    print(f"final phi gap: {final_gap:.3e} (relative {report['final_rel_gap']:.3e})")
    print(f"max coupling violation (signed): {max_violation:.3e}")
    print(f"consensus at end: {report['final_consensus']:.3e}, convergence step: {convergence}")

    if max_violation > VIOLATION_TOL:
        return EXIT_VIOLATION
    if args.require_convergence and convergence is None:
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def _run_cbf(loaded, args, out_dir: Path) -> int:
    scenario = loaded.cbf
    params = _merged_params(loaded.flow_defaults, args, scenario.flow_params)
    mode = args.mode if args.mode is not None else scenario.controller_mode
    scenario = dataclasses.replace(scenario, controller_mode=mode, flow_params=params)

    started = time.perf_counter()
    trace = simulate(scenario)
    wall = time.perf_counter() - started

    mb = scenario.barrier_count
    n = scenario.graph.node_count
    header = ["step", "time", "phi", "phi_gap"]
    header += [f"residual_{m}" for m in range(1, mb + 1)]
    header += ["consensus_inf_norm"]
    header += [f"h_{m}" for m in range(1, mb + 1)]
    header += ["pointwise_cost"]
    for i in range(1, n + 1):
        header += [f"p_{i}_x", f"p_{i}_y"]
    rows = []
    for k in range(trace.record_count):
        row = [
            str(k),
            _fmt(trace.times[k]),
            _fmt(trace.pointwise[k]),
            _fmt(trace.pointwise[k] - trace.frozen_optimal[k]),
        ]
        row += [_fmt(v) for v in trace.residuals[k]]
        row.append(_fmt(trace.consensus[k]))
        row += [_fmt(v) for v in trace.h_values[k]]
        row.append(_fmt(trace.pointwise[k]))
        row += [_fmt(v) for v in trace.positions[k].ravel()]
        rows.append(row)
    _write_csv(out_dir / "trace.csv", header, rows)

    min_h = float(trace.safety_min.min())
    report = {
        "scenario": loaded.name,
        "kind": "cbf",
        "mode": mode,
        "k0": params.k0,
        "dt": params.dt,
        "horizon": params.horizon,
        "steps": trace.record_count - 1,
        "wall_time_s": wall,
        "safety_minima": [float(v) for v in trace.safety_min],
        "min_h": min_h,
        "max_violation": float(trace.residuals.max()),
        "integrated_cost": trace.integrated_cost,
        "integrated_frozen_cost": trace.integrated_frozen,
        "final_consensus": float(trace.consensus[-1]),
        "convergence_step": _convergence_step(trace.consensus, args.tol_consensus),
        "aux_scalars": trace.aux_scalars,
    }
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(f"wrote {out_dir / 'trace.csv'} and {out_dir / 'report.json'}")
    print(f"mode: {mode}, steps: {report['steps']}, wall time: {wall:.1f}s")
    print(f"safety minima per barrier: {[f'{v:.4g}' for v in trace.safety_min]}")
    print(f"integrated cost: {trace.integrated_cost:.6g} (frozen optimum {trace.integrated_frozen:.6g})")

    if min_h < -VIOLATION_TOL:
        return EXIT_VIOLATION
    if args.require_convergence and report["convergence_step"] is None:
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        loaded = load_scenario(args.scenario, seed=args.seed)
    except ScenarioError as exc:
        print(exc, file=sys.stderr)
        return EXIT_SCENARIO

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        if loaded.kind == "static":
            return _run_static(loaded, args, out_dir)
        return _run_cbf(loaded, args, out_dir)
    except InconsistentPatternError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except (ValueError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except (
        FlowStepError,
        CbfStepError,
        CentralizedSolveError,
        LocalInfeasibleError,
        UnboundedLocalError,
    ) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def _cmd_diagnose(args) -> int:
    try:
        loaded = load_scenario(args.scenario, seed=args.seed)
    except ScenarioError as exc:
        print(exc, file=sys.stderr)
        return EXIT_SCENARIO

    print(f"scenario: {loaded.name} ({loaded.kind})")
    if loaded.kind == "static":
        problem = loaded.problem
        graph = problem.graph
        print(f"graph: {graph.node_count} nodes, {len(graph.edges)} edges, connected: {graph.is_connected()}")
        dense_flags = slater_rank_flag(problem, "dense")
        sparse_flags = slater_rank_flag(problem, "sparse")
        print(f"rank condition per agent (dense): {list(dense_flags)}")
        print(f"rank condition per agent (sparse): {list(sparse_flags)}")
        consistency = check_consistency(graph, problem.pattern)
        bad = [m for m, ok in enumerate(consistency, start=1) if not ok]
        print(f"constraint consistency: {'all ok' if not bad else f'failing constraints {bad}'}")
        mats = [a.coupling_matrix for a in problem.agents]
        constraint_count = problem.constraint_count
    else:
        scenario = loaded.cbf
        graph = scenario.graph
        print(f"graph: {graph.node_count} nodes, {len(graph.edges)} edges, connected: {graph.is_connected()}")
        state = scenario.initial_state
        for m, barrier in enumerate(scenario.barriers, start=1):
            print(f"barrier {m}: h(0) = {barrier.value(state.time, state.positions):.6g}")
        mats = [
            np.column_stack([-barrier.state_weights[i] for barrier in scenario.barriers])
            for i in range(graph.node_count)
        ]
        constraint_count = scenario.barrier_count

    try:
        lam_lo, lam_hi = multiplier_sensitivity_bounds(mats)
        k0 = gain_bound(mats, args.d_bound, args.eps, graph, constraint_count)
        print(f"multiplier sensitivity eigenvalue range: [{lam_lo:.6g}, {lam_hi:.6g}]")
        print(f"gain bound (D={args.d_bound}, eps={args.eps}): k0 >= {k0:.6g}")
    except (GainBoundError, ValueError) as exc:
        print(f"gain bound unavailable: {exc}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feasiflow",
        description="Violation-free distributed solver for constraint-coupled quadratic programs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", required=True, help="built-in name (static9, formation9) or YAML path")
        p.add_argument("--seed", type=int, default=None, help="override seed for randomized scenarios")

    run_p = sub.add_parser("run", help="run a scenario and export trace.csv / report.json")
    common(run_p)
    run_p.add_argument("--mode", choices=("nominal", "centralized", "distributed", "naive"), default=None,
                       help="controller mode for closed-loop scenarios")
    run_p.add_argument("--variant", choices=("dense", "sparse", "sign"), default=None,
                       help="allocation update variant for static scenarios")
    run_p.add_argument("--k0", type=float, default=None, help="flow gain")
    run_p.add_argument("--dt", type=float, default=None, help="Euler step size")
    run_p.add_argument("--horizon", type=float, default=None, help="simulated time span")
    run_p.add_argument("--sat-band", type=float, default=None, help="saturation band of the sign variant")
    run_p.add_argument("--sat-slope", type=float, default=None, help="saturation slope of the sign variant")
    run_p.add_argument("--out-dir", default="out", help="directory for trace.csv and report.json")
    run_p.add_argument("--tol-consensus", type=float, default=1e-3,
                       help="multiplier disagreement level defining the reported convergence step")
    run_p.add_argument("--require-convergence", action="store_true",
                       help="exit 5 when consensus never reaches --tol-consensus")
    run_p.set_defaults(func=_cmd_run)

    diag_p = sub.add_parser("diagnose", help="check assumptions and compute the sign-flow gain bound")
    common(diag_p)
    diag_p.add_argument("--d-bound", type=float, default=0.0, help="bound on the drift of the local problems")
    diag_p.add_argument("--eps", type=float, default=0.1, help="margin in the gain bound")
    diag_p.set_defaults(func=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
