"""Violation-free distributed solver for constraint-coupled convex programs.

Agents holding private quadratic costs and shares of linear coupling rows
cooperate over a graph: each agent repeatedly solves a small local QP at the
current constraint allocation, exchanges multipliers with its neighbors, and
moves its allocation against the disagreement. Every iterate of every update
variant satisfies the coupled constraints, which makes the intermediate
solutions usable long before convergence. A safety-filter application layers
the same machinery under barrier-constrained multi-robot control.
"""

from .cbf import (
    AffineBarrier,
    CbfScenario,
    CbfStepError,
    ClosedLoopTrace,
    FormationSpec,
    MasState,
    cbf_row,
    nominal_controller,
    pointwise_cost,
    simulate,
)
from .flows import (
    FlowParams,
    FlowState,
    FlowStepError,
    FlowTrace,
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
    sign_step,
    solve_round,
    sparse_step,
)
from .localqp import (
    FixedPointError,
    LocalInfeasibleError,
    LocalProblem,
    LocalSolution,
    UnboundedLocalError,
    constraint_shift,
    fixed_point_residual,
    solve_fixed_point,
    solve_local,
)
from .network import (
    Graph,
    Permutation,
    SparsityPattern,
    agents_to_constraints_perm,
    check_consistency,
    induced_subgraph_laplacian,
    laplacian,
    laplacian_row,
)
from .problem import (
    AgentSpec,
    CentralizedSolveError,
    CoupledProblem,
    QuadraticCost,
    centralized_solve,
    coupling_residuals,
    lift_feasible_point,
    linear_feasibility,
    slater_rank_flag,
)
from .scenarios import (
    BUILTIN_SCENARIOS,
    bound_levels,
    build_formation9,
    build_static9,
    default_nine_node_graph,
    random_connected_graph,
    random_coupled_problem,
    random_identity_qp,
)

__version__ = "0.1.0"

__all__ = [
    "AffineBarrier",
    "AgentSpec",
    "BUILTIN_SCENARIOS",
    "CbfScenario",
    "CbfStepError",
    "CentralizedSolveError",
    "ClosedLoopTrace",
    "CoupledProblem",
    "FixedPointError",
    "FlowParams",
    "FlowState",
    "FlowStepError",
    "FlowTrace",
    "FormationSpec",
    "GainBoundError",
    "Graph",
    "InconsistentPatternError",
    "LocalInfeasibleError",
    "LocalProblem",
    "LocalSolution",
    "MasState",
    "Permutation",
    "QuadraticCost",
    "SparsityPattern",
    "UnboundedLocalError",
    "agents_to_constraints_perm",
    "assemble_subgradient",
    "auxiliary_scalar_count",
    "bound_levels",
    "build_formation9",
    "build_static9",
    "cbf_row",
    "centralized_solve",
    "check_consistency",
    "constraint_shift",
    "coupling_residuals",
    "default_nine_node_graph",
    "dense_step",
    "fixed_point_residual",
    "gain_bound",
    "induced_subgraph_laplacian",
    "laplacian",
    "laplacian_row",
    "lift_feasible_point",
    "linear_feasibility",
    "multiplier_consensus",
    "multiplier_sensitivity_bounds",
    "nominal_controller",
    "phi_total",
    "pointwise_cost",
    "random_connected_graph",
    "random_coupled_problem",
    "random_identity_qp",
    "run_flow",
    "sat_vec",
    "sign_step",
    "simulate",
    "solve_fixed_point",
    "solve_local",
    "solve_round",
    "sparse_step",
    "slater_rank_flag",
]
