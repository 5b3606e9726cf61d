"""Safety filtering for planar single-integrator teams.

Time-varying affine barrier functions over the joint state induce one linear
coupling row per barrier on the agents' velocity commands. Minimally
modifying a nominal formation controller subject to those rows is a coupled
QP of exactly the shape the allocation flow solves, with identity local
Hessians. Four controller modes are simulated side by side: the raw nominal
controller, the centrally filtered one, the allocation-flow filtered one
(saturated sign updates riding the physics clock), and a naive variant that
splits every row evenly without coordination.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flows import FlowParams, assemble_subgradient, multiplier_consensus, sat_vec
from .localqp import (
    FixedPointError,
    LocalInfeasibleError,
    LocalProblem,
    UnboundedLocalError,
    solve_fixed_point,
    solve_local,
)
from .network import Graph, SparsityPattern, laplacian
from .problem import AgentSpec, QuadraticCost

CONTROLLER_MODES = ("nominal", "centralized", "distributed", "naive")


class CbfStepError(RuntimeError):
    """A filter QP failed during closed-loop simulation."""

    def __init__(self, time: float, mode: str, cause: Exception):
        self.time = time
        self.mode = mode
        self.cause = cause
        super().__init__(f"{mode} controller failed at t={time:.6g}: {cause}")


@dataclass(frozen=True)
class AffineBarrier:
    """Scalar barrier h(t, p) = offset + time_slope*t + sum_i weights_i . p_i.

    Safety means h >= 0. class_k_gain is the linear class-K gain k in the
    barrier condition dh/dt >= -k h.
    """

    offset: float
    time_slope: float
    state_weights: np.ndarray  # (N, 2), row per agent
    class_k_gain: float = 1.0

    def __post_init__(self) -> None:
        weights = np.array(self.state_weights, dtype=float)
        if weights.ndim != 2 or weights.shape[1] != 2:
            raise ValueError("state_weights must be an (N, 2) array")
        if not np.any(weights):
            raise ValueError("at least one agent weight must be nonzero")
        if self.class_k_gain <= 0:
            raise ValueError("class_k_gain must be positive")
        weights.setflags(write=False)
        object.__setattr__(self, "state_weights", weights)

    @property
    def agent_count(self) -> int:
        return self.state_weights.shape[0]

    def value(self, time: float, positions: np.ndarray) -> float:
        positions = np.asarray(positions, dtype=float).reshape(self.agent_count, 2)
        return float(self.offset + self.time_slope * time + (self.state_weights * positions).sum())


@dataclass
class MasState:
    """Joint state of the team: one planar position per agent, plus time."""

    positions: np.ndarray
    time: float = 0.0

    def __post_init__(self) -> None:
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError("positions must be an (N, 2) array")
        self.positions = pos

    @property
    def agent_count(self) -> int:
        return self.positions.shape[0]


@dataclass
class FormationSpec:
    """Relative-position targets over graph edges, plus an optional leader.

    desired_relative maps an ordered pair (i, j) to the desired value of
    p_j - p_i; entries must be antisymmetric. The leader, when set, gets an
    extra attraction toward leader_target.
    """

    desired_relative: dict
    leader: int | None = None
    leader_target: np.ndarray | None = None

    def __post_init__(self) -> None:
        rel = {}
        for key, vec in self.desired_relative.items():
            i, j = int(key[0]), int(key[1])
            rel[(i, j)] = np.asarray(vec, dtype=float).reshape(2)
        for (i, j), vec in rel.items():
            back = rel.get((j, i))
            if back is not None and not np.allclose(vec, -back, atol=1e-12):
                raise ValueError(f"relative targets for ({i},{j}) and ({j},{i}) are not opposite")
        self.desired_relative = rel
        if self.leader is not None:
            if self.leader_target is None:
                raise ValueError("a leader needs a leader_target")
            self.leader_target = np.asarray(self.leader_target, dtype=float).reshape(2)

    @classmethod
    def from_targets(cls, targets: np.ndarray, graph: Graph, leader: int | None = None) -> "FormationSpec":
        """Derive edge-relative targets from absolute target positions."""
        targets = np.asarray(targets, dtype=float).reshape(graph.node_count, 2)
        rel = {}
        for i, j in graph.edges:
            rel[(i, j)] = targets[j - 1] - targets[i - 1]
            rel[(j, i)] = targets[i - 1] - targets[j - 1]
        lt = targets[leader - 1] if leader is not None else None
        return cls(rel, leader, lt)

    def relative_target(self, i: int, j: int) -> np.ndarray:
        vec = self.desired_relative.get((i, j))
        if vec is None:
            back = self.desired_relative.get((j, i))
            if back is None:
                raise KeyError(f"no relative target for edge ({i},{j})")
            vec = -back
        return vec


@dataclass
class CbfScenario:
    """Everything a closed-loop run needs.

    Validation requires every barrier to start nonnegative so that keeping
    h >= 0 is a forward-invariance statement rather than a recovery one.
    """

    graph: Graph
    formation: FormationSpec
    barriers: list
    initial_state: MasState
    target_positions: np.ndarray
    controller_mode: str = "distributed"
    flow_params: FlowParams = field(default_factory=lambda: FlowParams(variant="sign", horizon=40.0))

    def __post_init__(self) -> None:
        if self.controller_mode not in CONTROLLER_MODES:
            raise ValueError(f"controller_mode must be one of {CONTROLLER_MODES}")
        n = self.graph.node_count
        if self.initial_state.agent_count != n:
            raise ValueError("initial state size does not match the graph")
        self.target_positions = np.asarray(self.target_positions, dtype=float).reshape(n, 2)
        for b, barrier in enumerate(self.barriers, start=1):
            if barrier.agent_count != n:
                raise ValueError(f"barrier {b} weight count does not match the graph")
            h0 = barrier.value(self.initial_state.time, self.initial_state.positions)
            if h0 < 0:
                raise ValueError(f"barrier {b} starts unsafe: h(0) = {h0:.6g} < 0")

    @property
    def barrier_count(self) -> int:
        return len(self.barriers)


def cbf_row(barrier: AffineBarrier, state: MasState) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent pieces of one barrier's coupling row on the commands.

    Returns (a, b) with a[i] the agent's 2-vector coefficient and b[i] its
    offset share. The row sum_i a_i . x_i + sum_i b_i <= 0 is equivalent to
    dh/dt >= -k h under single-integrator dynamics. Each agent's offset
    carries its own position term; the time terms split evenly.
    """
    k = barrier.class_k_gain
    n = barrier.agent_count
    a = -barrier.state_weights
    own = (barrier.state_weights * state.positions).sum(axis=1)
    shared = (k * (barrier.offset + barrier.time_slope * state.time) + barrier.time_slope) / n
    b = -k * own - shared
    return a, b


def nominal_controller(state: MasState, formation: FormationSpec, graph: Graph) -> np.ndarray:
    """Formation-tracking velocity commands, one 2-vector per agent.

    Each agent descends its relative-position error over its edges (the
    consensus direction p_j - p_i minus its desired value, which linearizes
    to minus-Laplacian feedback on the error); the leader additionally
    steers itself to the absolute target point. With a connected graph and a
    leader, position errors decay to zero.
    """
    n = graph.node_count
    p = state.positions
    x = np.zeros((n, 2))
    for i in range(1, n + 1):
        cmd = np.zeros(2)
        for j in graph.neighbors(i):
            cmd += (p[j - 1] - p[i - 1]) - formation.relative_target(i, j)
        if formation.leader == i:
            cmd += formation.leader_target - p[i - 1]
        x[i - 1] = cmd
    return x


def pointwise_cost(x: np.ndarray, x_nom: np.ndarray) -> float:
    """Half the squared distance between applied and nominal commands."""
    diff = np.asarray(x, dtype=float).ravel() - np.asarray(x_nom, dtype=float).ravel()
    if diff.shape[0] != np.asarray(x_nom).size:
        raise ValueError("command stacks must have equal size")
    return float(0.5 * diff @ diff)


@dataclass
class ClosedLoopTrace:
    """Step records of one closed-loop run plus integrated summaries."""

    mode: str
    dt: float
    times: np.ndarray
    positions: np.ndarray  # (R, N, 2)
    h_values: np.ndarray  # (R, Mb)
    commands: np.ndarray  # (R, N, 2)
    nominal: np.ndarray  # (R, N, 2)
    pointwise: np.ndarray
    frozen_optimal: np.ndarray
    residuals: np.ndarray  # (R, Mb)
    consensus: np.ndarray
    integrated_cost: float
    integrated_frozen: float
    safety_min: np.ndarray  # per-barrier minimum of h over the run
    aux_scalars: int

    @property
    def record_count(self) -> int:
        return int(self.times.shape[0])


def _frozen_optimum(a_cols: np.ndarray, b_sum: np.ndarray, x_nom: np.ndarray, warm: np.ndarray | None):
    """Centralized filter QP at one frozen time: min 0.5|x - x_nom|^2 over
    the stacked rows. a_cols is (2N, Mb), b_sum the summed offsets."""
    dim = a_cols.shape[0]
    flat = x_nom.ravel()
    cost = QuadraticCost(np.eye(dim), -flat, float(0.5 * flat @ flat))
    spec = AgentSpec(dim, cost, a_cols, np.zeros(a_cols.shape[1]))
    problem = LocalProblem(spec, tuple(range(1, a_cols.shape[1] + 1)), b_sum)
    return solve_local(problem, warm)


def _identity_filter(a_mat: np.ndarray, x_nom_i: np.ndarray, shift: np.ndarray, warm: np.ndarray | None):
    """One agent's filter QP; fixed-point iteration with active-set fallback."""
    try:
        return solve_fixed_point(a_mat, x_nom_i, shift, warm)
    except FixedPointError:
        m = a_mat.shape[1]
        cost = QuadraticCost(np.eye(2), -x_nom_i, float(0.5 * x_nom_i @ x_nom_i))
        spec = AgentSpec(2, cost, a_mat, np.zeros(m))
        return solve_local(LocalProblem(spec, tuple(range(1, m + 1)), shift), warm)


def simulate(scenario: CbfScenario) -> ClosedLoopTrace:
    """Forward-Euler co-simulation of physics, filter, and (in distributed
    mode) the allocation flow, all on one clock.

    Records K+1 snapshots for horizon K*dt: commands, barrier values, row
    residuals, the pointwise filter cost, and the frozen-time centralized
    optimum for comparison. Positions advance after each of the first K
    records; allocations advance with saturated sign updates in distributed
    mode and persist across steps.
    """
    params = scenario.flow_params
    graph = scenario.graph
    n = graph.node_count
    mb = scenario.barrier_count
    mode = scenario.controller_mode
    dt = params.dt
    total = params.step_count

    dense_pattern = SparsityPattern(n, tuple(frozenset(range(1, n + 1)) for _ in range(mb)))

    p = scenario.initial_state.positions.copy()
    t0 = scenario.initial_state.time
    y = np.zeros(n * mb)
    warm_c = np.zeros((n, mb))
    warm_frozen: np.ndarray | None = None

    times, positions, h_values, commands, nominals = [], [], [], [], []
    pointwise, frozen, residuals, consensus = [], [], [], []

    for k in range(total + 1):
        t = t0 + k * dt
        state = MasState(p.copy(), t)
        x_nom = nominal_controller(state, scenario.formation, graph)

        a_list, b_mat = [], np.zeros((n, mb))
        for m, barrier in enumerate(scenario.barriers):
            a, b = cbf_row(barrier, state)
            a_list.append(a)
            b_mat[:, m] = b
        # agent i's coupling block: columns are its a_i^m vectors
        a_blocks = [np.column_stack([a_list[m][i] for m in range(mb)]) for i in range(n)]
        a_cols = np.vstack(a_blocks)  # (2N, Mb) stacked coupling matrix
        b_sum = b_mat.sum(axis=0)

        try:
            frozen_sol = _frozen_optimum(a_cols, b_sum, x_nom, warm_frozen)
        except (LocalInfeasibleError, UnboundedLocalError) as exc:
            raise CbfStepError(t, mode, exc) from exc
        warm_frozen = frozen_sol.multipliers

        c: np.ndarray | None = None
        try:
            if mode == "nominal":
                x = x_nom.copy()
            elif mode == "centralized":
                x = frozen_sol.primal.reshape(n, 2)
                c = np.tile(frozen_sol.multipliers, (n, 1))
            else:
                if mode == "distributed":
                    lap_shift = laplacian(graph) @ y.reshape(mb, n).T
                else:
                    lap_shift = np.zeros((n, mb))
                x = np.zeros((n, 2))
                c = np.zeros((n, mb))
                for i in range(n):
                    shift = b_mat[i] + lap_shift[i]
                    sol = _identity_filter(a_blocks[i], x_nom[i], shift, warm_c[i])
                    x[i] = sol.primal
                    c[i] = sol.multipliers
                warm_c = c.copy()
        except (LocalInfeasibleError, UnboundedLocalError, FixedPointError) as exc:
            raise CbfStepError(t, mode, exc) from exc

        times.append(t)
        positions.append(p.copy())
        h_values.append([barrier.value(t, p) for barrier in scenario.barriers])
        commands.append(x.copy())
        nominals.append(x_nom)
        pointwise.append(pointwise_cost(x, x_nom))
        frozen.append(frozen_sol.value)
        residuals.append(a_cols.T @ x.ravel() + b_sum)
        consensus.append(multiplier_consensus(graph, c, dense_pattern) if c is not None else 0.0)

        if k < total:
            if mode == "distributed":
                zeta = assemble_subgradient(graph, c, "dense", dense_pattern)
                y = y - dt * params.k0 * sat_vec(zeta, params.sat_band, params.sat_slope)
            p = p + dt * x

    pw = np.array(pointwise)
    fr = np.array(frozen)
    hv = np.array(h_values)
    return ClosedLoopTrace(
        mode=mode,
        dt=dt,
        times=np.array(times),
        positions=np.array(positions),
        h_values=hv,
        commands=np.array(commands),
        nominal=np.array(nominals),
        pointwise=pw,
        frozen_optimal=fr,
        residuals=np.array(residuals),
        consensus=np.array(consensus),
        integrated_cost=float(dt * pw[:total].sum()),
        integrated_frozen=float(dt * fr[:total].sum()),
        safety_min=hv.min(axis=0),
        aux_scalars=n * mb if mode == "distributed" else 0,
    )
