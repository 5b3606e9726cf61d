import numpy as np
import pytest

from feasiflow.flows import (
    FlowParams,
    FlowState,
    FlowStepError,
    GainBoundError,
    InconsistentPatternError,
    assemble_subgradient,
    auxiliary_scalar_count,
    dense_step,
    gain_bound,
    multiplier_consensus,
    multiplier_sensitivity_bounds,
    phi_total,
    run_flow,
    sat_vec,
    solve_round,
)
from feasiflow.network import Graph, SparsityPattern, agents_to_constraints_perm, laplacian
from feasiflow.problem import (
    AgentSpec,
    CoupledProblem,
    QuadraticCost,
    centralized_solve,
    coupling_residuals,
    lift_feasible_point,
)
from feasiflow.scenarios import random_coupled_problem

PATH2 = Graph(2, frozenset({(1, 2)}))
PATH3 = Graph(3, frozenset({(1, 2), (2, 3)}))


def scalar_agent(a, b, hess=1.0):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    return AgentSpec(
        dim=1,
        cost=QuadraticCost(np.array([[hess]]), np.zeros(1)),
        coupling_matrix=a.reshape(1, -1),
        coupling_offsets=np.atleast_1d(np.asarray(b, dtype=float)),
    )


def budget_problem(hessians=(1.0, 1.0)):
    """Agents share x_1 + x_2 >= 2 with separable quadratic costs."""
    agents = tuple(scalar_agent(-1.0, 1.0, hess=h) for h in hessians)
    return CoupledProblem(agents, PATH2)


def test_sat_vec_values():
    out = sat_vec(np.array([0.2, -0.05, 0.0, -0.3, 0.02]), 0.1, 10.0)
    assert out == pytest.approx([1.0, -0.5, 0.0, -1.0, 0.2])


def test_sat_vec_tiny_band_acts_like_sign():
    out = sat_vec(np.array([0.5, -2.0, 0.0]), 1e-9, 1e9)
    assert out == pytest.approx([1.0, -1.0, 0.0])


def test_assemble_consensus_is_zero():
    c = np.array([[3.0, -1.0], [3.0, -1.0]])
    zeta = assemble_subgradient(PATH2, c)
    assert np.abs(zeta).max() == 0.0


def test_assemble_two_node_example():
    zeta = assemble_subgradient(PATH2, np.array([[2.0], [0.0]]))
    assert np.array_equal(zeta, [2.0, -2.0])


def test_assemble_flat_matches_matrix_input():
    rng = np.random.default_rng(1)
    c = rng.normal(size=(3, 2))
    flat = assemble_subgradient(PATH3, c.ravel())
    mat = assemble_subgradient(PATH3, c)
    assert np.array_equal(flat, mat)


def test_assemble_singleton_block_masked():
    pattern = SparsityPattern(2, (frozenset({1, 2}), frozenset({1})))
    c = np.array([[1.0, 5.0], [0.0, 2.0]])
    zeta = assemble_subgradient(PATH2, c, "dense", pattern).reshape(2, 2)
    assert np.array_equal(zeta[0], [1.0, -1.0])
    assert np.array_equal(zeta[1], [0.0, 0.0])


def test_assemble_sparse_uses_induced_laplacian():
    pattern = SparsityPattern(3, (frozenset({1, 2}),))
    c = np.array([[2.0], [0.0], [5.0]])
    zeta = assemble_subgradient(PATH3, c, "sparse", pattern)
    # node 3 is outside the constraint, so its entry does not move
    assert np.array_equal(zeta, [2.0, -2.0, 0.0])
    dense = assemble_subgradient(PATH3, c, "dense", pattern)
    assert np.array_equal(dense, [2.0, -7.0, 5.0])


def test_assemble_input_validation():
    with pytest.raises(ValueError, match="split"):
        assemble_subgradient(PATH2, np.zeros(5))
    with pytest.raises(ValueError, match="mode"):
        assemble_subgradient(PATH2, np.zeros(2), "full")
    with pytest.raises(ValueError, match="pattern"):
        assemble_subgradient(PATH2, np.zeros(2), "sparse")


def test_consensus_metric():
    pattern = SparsityPattern(2, (frozenset({1, 2}),))
    assert multiplier_consensus(PATH2, np.array([[1.5], [1.5]]), pattern) == 0.0
    assert multiplier_consensus(PATH2, np.array([[2.0], [0.0]]), pattern) == 2.0
    lonely = SparsityPattern(2, (frozenset({1}),))
    assert multiplier_consensus(PATH2, np.array([[2.0], [0.0]]), lonely) == 0.0


def test_params_validation_and_step_count():
    assert FlowParams(horizon=1.0, dt=0.01).step_count == 100
    assert FlowParams(horizon=0.0).step_count == 0
    for kw in ({"k0": 0.0}, {"dt": -1.0}, {"horizon": -0.1}, {"variant": "euler"}, {"sat_band": 0.0}):
        with pytest.raises(ValueError):
            FlowParams(**kw)


def test_dense_step_fixed_at_consensus():
    prob = budget_problem()
    state = dense_step(FlowState(0.0, np.zeros(2), np.zeros(2)), FlowParams(), prob)
    # symmetric agents agree immediately: y stays put, both halves at 1
    assert np.array_equal(state.y, [0.0, 0.0])
    assert state.x == pytest.approx([1.0, 1.0], abs=1e-10)
    assert state.phi == pytest.approx(1.0, abs=1e-10)


def test_dense_flow_converges_to_centralized():
    prob = budget_problem(hessians=(1.0, 2.0))
    _, cost_star, _ = centralized_solve(prob)
    assert cost_star == pytest.approx(4.0 / 3.0, abs=1e-9)
    trace = run_flow(prob, FlowParams(horizon=10.0))
    assert trace.phi[-1] - cost_star <= 1e-3 * max(1.0, abs(cost_star))
    assert trace.consensus[-1] <= 1e-3
    # violation-free at every record
    assert trace.residuals.max() <= 1e-6
    # monotone descent up to discretization noise
    assert np.diff(trace.phi).max(initial=-np.inf) <= 1e-6
    assert trace.phi[-1] < trace.phi[0]
    # sum of each allocation block is conserved
    sums = trace.ys.reshape(trace.record_count, 1, 2).sum(axis=2)
    assert np.abs(sums - sums[0]).max() <= 1e-12


def test_sign_flow_stays_feasible_and_settles():
    prob = budget_problem(hessians=(1.0, 2.0))
    trace = run_flow(prob, FlowParams(variant="sign", horizon=10.0))
    assert trace.residuals.max() <= 1e-6
    assert trace.consensus[-1] <= 0.1
    _, cost_star, _ = centralized_solve(prob)
    assert abs(trace.phi[-1] - cost_star) <= 0.05


def test_sparse_matches_dense_on_dense_pattern():
    rng = np.random.default_rng(5)
    prob = random_coupled_problem(
        rng, n_agents=4, constraint_count=2, pattern="dense", ensure_local_rank=True
    )
    dense = run_flow(prob, FlowParams(horizon=0.5))
    sparse = run_flow(prob, FlowParams(variant="sparse", horizon=0.5))
    assert np.array_equal(dense.ys, sparse.ys)
    assert np.array_equal(dense.phi, sparse.phi)


def test_singleton_allocations_stay_pinned():
    # constraint 2 touches only agent 1; its allocation block must never move
    agents = (
        scalar_agent([-1.0, 1.0], [1.0, -5.0]),
        scalar_agent([-1.0, 0.0], [1.0, 0.0]),
        scalar_agent([-1.0, 0.0], [1.0, 0.0]),
    )
    prob = CoupledProblem(agents, PATH3)
    assert prob.pattern.agents_of_constraint[1] == frozenset({1})
    for variant in ("dense", "sparse", "sign"):
        trace = run_flow(prob, FlowParams(variant=variant, horizon=0.3))
        assert np.abs(trace.ys[:, 3:6]).max() == 0.0
        assert trace.residuals.max() <= 1e-6


def test_auxiliary_scalar_count():
    pattern = SparsityPattern(3, (frozenset({1, 2, 3}), frozenset({1, 2}), frozenset({3})))
    assert auxiliary_scalar_count(pattern, "dense") == 6
    assert auxiliary_scalar_count(pattern, "sign") == 6
    assert auxiliary_scalar_count(pattern, "sparse") == 5


def test_phi_translation_invariance():
    rng = np.random.default_rng(9)
    prob = random_coupled_problem(
        rng, n_agents=3, constraint_count=2, pattern="dense", ensure_local_rank=True
    )
    y = 0.1 * rng.normal(size=6)
    base = phi_total(prob, y)
    shifted = y.copy()
    shifted[0:3] += 2.0
    shifted[3:6] -= 7.0
    assert phi_total(prob, shifted) == pytest.approx(base, abs=1e-9)


def test_phi_dominates_centralized_cost():
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        prob = random_coupled_problem(
            rng, n_agents=3, constraint_count=2, pattern="dense", ensure_local_rank=True
        )
        _, cost_star, _ = centralized_solve(prob)
        assert phi_total(prob, np.zeros(6)) >= cost_star - 1e-8


def test_phi_at_lifted_optimum_equals_centralized():
    rng = np.random.default_rng(3)
    prob = random_coupled_problem(
        rng, n_agents=3, constraint_count=2, pattern="dense", ensure_local_rank=True
    )
    x_star, cost_star, _ = centralized_solve(prob)
    y_star = lift_feasible_point(prob, x_star)
    assert phi_total(prob, y_star) == pytest.approx(cost_star, abs=1e-6)


def test_run_flow_horizon_zero_single_record():
    trace = run_flow(budget_problem(), FlowParams(horizon=0.0))
    assert trace.record_count == 1
    assert list(trace.steps) == [0]
    assert trace.early_stop_step is None


def test_run_flow_early_exit():
    trace = run_flow(
        budget_problem(), FlowParams(horizon=1.0), tol_consensus=1e-6, patience=3
    )
    assert trace.early_stop_step == 2
    assert trace.record_count == 3
    assert trace.consensus.max() <= 1e-6


def test_run_flow_requires_connected_graph():
    prob = CoupledProblem(
        (scalar_agent(-1.0, 1.0), scalar_agent(-1.0, 1.0)), Graph(2, frozenset())
    )
    with pytest.raises(ValueError, match="connected"):
        run_flow(prob, FlowParams(horizon=0.1))


def test_sparse_flow_rejects_inconsistent_pattern():
    # agents 1 and 3 share a constraint but are not adjacent on the path
    agents = (scalar_agent(-1.0, 1.0), scalar_agent(0.0, 0.0), scalar_agent(-1.0, 1.0))
    prob = CoupledProblem(agents, PATH3)
    with pytest.raises(InconsistentPatternError) as exc:
        run_flow(prob, FlowParams(variant="sparse", horizon=0.1))
    assert exc.value.constraints == (1,)
    # the consistency gate is sparse-only; other variants start fine
    trace = run_flow(prob, FlowParams(horizon=0.0))
    assert trace.residuals.max() <= 1e-6


def test_flow_step_error_carries_time_and_agent():
    # agent 1 owns a zero-column row with positive offset: infeasible at t=0
    agents = (scalar_agent([-1.0, 0.0], [1.0, 1.0]), scalar_agent([-1.0, 0.0], [1.0, 0.0]))
    prob = CoupledProblem(agents, PATH2)
    with pytest.raises(FlowStepError) as exc:
        run_flow(prob, FlowParams(horizon=0.1))
    assert exc.value.time == 0.0
    assert exc.value.agent == 1


def test_run_flow_checks_y0_length():
    with pytest.raises(ValueError, match="y0"):
        run_flow(budget_problem(), FlowParams(horizon=0.1), y0=np.zeros(3))


def test_multiplier_stacks_permute_consistently():
    prob = budget_problem(hessians=(1.0, 2.0))
    trace = run_flow(prob, FlowParams(horizon=0.2))
    perm = agents_to_constraints_perm(2, 1)
    for k in range(trace.record_count):
        agent_major = trace.cs[k]
        constraint_major = trace.cs[k].reshape(2, 1).T.ravel()
        assert np.array_equal(perm.apply(agent_major), constraint_major)


def test_solve_round_reports_values():
    prob = budget_problem()
    rr = solve_round(prob, np.zeros(2))
    assert rr.phi == pytest.approx(1.0, abs=1e-10)
    assert rr.values == pytest.approx([0.5, 0.5], abs=1e-10)
    assert rr.c.shape == (2, 1)
    assert coupling_residuals(prob, rr.x).max() <= 1e-10


def test_sensitivity_bounds_shared_direction():
    # one agent, single coupled direction [1, 1]: Gram eigenvalue 2
    mats = [np.array([[1.0], [1.0]])]
    lo, hi = multiplier_sensitivity_bounds(mats)
    assert lo == pytest.approx(0.5, abs=1e-12)
    assert hi == pytest.approx(0.5, abs=1e-12)


def test_sensitivity_bounds_orthogonal_scaled_columns():
    mats = [0.1 * np.array([[1.0, 1.0], [1.0, -1.0]])] * 9
    lo, hi = multiplier_sensitivity_bounds(mats)
    assert lo == pytest.approx(50.0, abs=1e-9)
    assert hi == pytest.approx(50.0, abs=1e-9)


def test_gain_bound_zero_disturbance_is_margin_over_lam():
    mats = [np.array([[1.0], [1.0]])]
    assert gain_bound(mats, 0.0, 0.1, PATH2) == 0.2


def test_gain_bound_with_disturbance():
    mats = [np.array([[1.0], [1.0]])]
    # (N D sqrt(M) lam_hi |L| + eps) / lam_lo with |L| = 2 on the 2-path
    assert gain_bound(mats, 0.05, 0.1, PATH2) == pytest.approx(0.4, abs=1e-12)


def test_gain_bound_input_validation():
    mats = [np.array([[1.0], [1.0]])]
    with pytest.raises(ValueError, match="eps"):
        gain_bound(mats, 0.0, 0.0, PATH2)
    with pytest.raises(ValueError, match="disturbance"):
        gain_bound(mats, -1.0, 0.1, PATH2)


def test_sensitivity_rejects_dependent_subset():
    with pytest.raises(GainBoundError) as exc:
        multiplier_sensitivity_bounds([np.array([[1.0, 1.0]])])
    assert exc.value.agent == 1
    assert exc.value.subset == (1, 2)


def test_sensitivity_enumeration_cap():
    with pytest.raises(ValueError, match="capped"):
        multiplier_sensitivity_bounds([np.ones((1, 21))])


def test_sensitivity_requires_some_constraint():
    with pytest.raises(ValueError, match="no participating"):
        multiplier_sensitivity_bounds([np.zeros((2, 3))])
