"""Forward-Euler discretizations of the allocation update laws.

The allocation vector y (constraint-major, one entry per agent and constraint)
is steered by Laplacian differences of the agents' local multipliers. Three
variants are provided: the plain subgradient flow, a sparsity-aware flow that
exchanges each constraint's entries only among participating agents, and a
saturated sign flow for tracking slowly varying problems. Every iterate of
every variant keeps the original coupled constraints satisfied, because each
agent enforces its own shifted row and the allocation differences cancel when
summed over the graph.

Constraints touching at most one agent carry no allocation dynamics: their
entries stay pinned at zero and their multipliers are excluded from the
exchanged subgradient, in both the dense and the sparse variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .localqp import LocalInfeasibleError, LocalProblem, UnboundedLocalError, constraint_shift, solve_local
from .network import Graph, SparsityPattern, check_consistency, induced_subgraph_laplacian, laplacian
from .problem import CoupledProblem, coupling_residuals

VARIANTS = ("dense", "sparse", "sign")


class FlowStepError(RuntimeError):
    """A local solve failed during the flow; carries the failing time stamp."""

    def __init__(self, time: float, agent: int, cause: Exception):
        self.time = time
        self.agent = agent
        self.cause = cause
        super().__init__(f"flow step failed at t={time:.6g} (agent {agent}): {cause}")


class InconsistentPatternError(ValueError):
    """Some constraint's participating agents induce a disconnected subgraph."""

    def __init__(self, constraints: tuple):
        self.constraints = constraints
        super().__init__(
            "sparse flow needs each constraint's agents to induce a connected subgraph; "
            f"failing constraints: {list(constraints)}"
        )


class GainBoundError(ValueError):
    """A constraint-direction subset is linearly dependent, so the bound's
    extreme eigenvalues are undefined."""

    def __init__(self, agent: int, subset: tuple):
        self.agent = agent
        self.subset = subset
        super().__init__(f"agent {agent}: constraint subset {list(subset)} is linearly dependent")


@dataclass(frozen=True)
class FlowParams:
    """Gains and discretization for a flow run."""

    k0: float = 1.0
    dt: float = 0.01
    horizon: float = 20.0
    variant: str = "dense"
    sat_band: float = 0.1
    sat_slope: float = 10.0

    def __post_init__(self) -> None:
        if self.k0 <= 0:
            raise ValueError("gain k0 must be positive")
        if self.dt <= 0:
            raise ValueError("step size dt must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.sat_band <= 0 or self.sat_slope <= 0:
            raise ValueError("saturation band and slope must be positive")

    @property
    def step_count(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class FlowState:
    """Snapshot of one flow iterate.

    y is constraint-major (block m stacks one entry per agent); c stacks each
    agent's multiplier vector agent-major. x and phi are filled once the local
    problems at y have been solved.
    """

    time: float
    y: np.ndarray
    c: np.ndarray
    x: np.ndarray | None = None
    phi: float | None = None


@dataclass
class RoundResult:
    """All agents' solutions at one allocation snapshot."""

    x: np.ndarray
    c: np.ndarray  # (N, M), row per agent
    phi: float
    values: np.ndarray


@dataclass
class FlowTrace:
    """Per-step records of a flow run plus run-level metadata."""

    variant: str
    k0: float
    dt: float
    steps: np.ndarray
    times: np.ndarray
    phi: np.ndarray
    residuals: np.ndarray
    consensus: np.ndarray
    ys: np.ndarray
    xs: np.ndarray
    cs: np.ndarray
    aux_scalars: int
    early_stop_step: int | None = None

    @property
    def record_count(self) -> int:
        return int(self.steps.shape[0])


def sat_vec(v: np.ndarray, band: float, slope: float) -> np.ndarray:
    """Piecewise-linear surrogate for the elementwise sign: +-1 outside the
    band, a linear ramp of the given slope inside it."""
    v = np.asarray(v, dtype=float)
    return np.where(v > band, 1.0, np.where(v < -band, -1.0, slope * v))


def solve_round(
    problem: CoupledProblem,
    y: np.ndarray,
    mode: str = "dense",
    warm: np.ndarray | None = None,
) -> RoundResult:
    """Solve all agents' local problems at one allocation snapshot.

    `warm` is an (N, M) array of previous multipliers used to seed each
    agent's active set. All agents read the same snapshot, so the order of
    solves does not matter.
    """
    n, m_count = problem.node_count, problem.constraint_count
    x = np.zeros(problem.total_dim)
    c = np.zeros((n, m_count))
    values = np.zeros(n)
    pos = 0
    for i, spec in enumerate(problem.agents, start=1):
        labels, shift = constraint_shift(y, i, spec, problem.graph, mode, problem.pattern)
        warm_i = warm[i - 1] if warm is not None else None
        try:
            sol = solve_local(LocalProblem(spec, labels, shift), warm_i)
        except (LocalInfeasibleError, UnboundedLocalError) as exc:
            exc.agent = i  # label for the flow-level error report
            raise
        x[pos : pos + spec.dim] = sol.primal
        c[i - 1] = sol.multipliers
        values[i - 1] = sol.value
        pos += spec.dim
    return RoundResult(x, c, float(values.sum()), values)


def assemble_subgradient(
    graph: Graph,
    c: np.ndarray,
    mode: str = "dense",
    pattern: SparsityPattern | None = None,
) -> np.ndarray:
    """Stack the allocation-direction subgradient from local multipliers.

    `c` is agent-major (flat or (N, M)); the result is constraint-major like
    y. Dense mode weights each constraint's multipliers by the full graph
    Laplacian; sparse mode by the subgraph induced by that constraint's
    agents. Constraints with at most one agent contribute zero when a pattern
    is supplied (their allocations are pinned).
    """
    n = graph.node_count
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        if c.shape[0] % n:
            raise ValueError(f"multiplier stack of length {c.shape[0]} does not split over {n} agents")
        c = c.reshape(n, -1)
    if c.shape[0] != n:
        raise ValueError(f"expected one multiplier row per agent, got shape {c.shape}")
    m_count = c.shape[1]
    if mode not in ("dense", "sparse", "sign"):
        raise ValueError(f"mode must be dense, sparse, or sign, got {mode!r}")
    if mode == "sparse" and pattern is None:
        raise ValueError("sparse assembly needs the sparsity pattern")

    full = laplacian(graph)
    zeta = np.zeros((m_count, n))
    for m in range(1, m_count + 1):
        if pattern is not None and len(pattern.agents_of_constraint[m - 1]) <= 1:
            continue
        if mode in ("dense", "sign") or pattern is None:
            lap = full
        else:
            members = pattern.agents_of_constraint[m - 1]
            lap = induced_subgraph_laplacian(graph, members)
        zeta[m - 1] = lap @ c[:, m - 1]
    return zeta.ravel()


def multiplier_consensus(graph: Graph, c: np.ndarray, pattern: SparsityPattern) -> float:
    """Worst-case disagreement of multipliers, per constraint, across the graph.

    For each constraint shared by two or more agents this is the infinity norm
    of the (induced) Laplacian applied to that constraint's multipliers; zero
    signals agreement among all participants. Constraints with at most one
    agent have nothing to agree on and are skipped.
    """
    n = graph.node_count
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        c = c.reshape(n, -1)
    worst = 0.0
    full = laplacian(graph)
    for m in range(1, c.shape[1] + 1):
        members = pattern.agents_of_constraint[m - 1]
        if len(members) <= 1:
            continue
        full_set = len(members) == n
        lap = full if full_set else induced_subgraph_laplacian(graph, members)
        worst = max(worst, float(np.abs(lap @ c[:, m - 1]).max(initial=0.0)))
    return worst


def _ensure_solved(state: FlowState, problem: CoupledProblem, mode: str) -> FlowState:
    if state.x is not None and state.phi is not None:
        return state
    warm = state.c.reshape(problem.node_count, problem.constraint_count) if state.c is not None else None
    rr = _solve_round_wrapped(problem, state.y, mode, warm, state.time)
    return FlowState(state.time, state.y, rr.c.ravel(), rr.x, rr.phi)


def _solve_round_wrapped(problem, y, mode, warm, time) -> RoundResult:
    try:
        return solve_round(problem, y, mode, warm)
    except (LocalInfeasibleError, UnboundedLocalError) as exc:
        agent = getattr(exc, "agent", 0)
        raise FlowStepError(time, agent, exc) from exc


def _advance(problem, mode, state: FlowState, y_next: np.ndarray, dt: float) -> FlowState:
    warm = state.c.reshape(problem.node_count, problem.constraint_count)
    t_next = state.time + dt
    rr = _solve_round_wrapped(problem, y_next, mode, warm, t_next)
    return FlowState(t_next, y_next, rr.c.ravel(), rr.x, rr.phi)


def dense_step(state: FlowState, params: FlowParams, problem: CoupledProblem) -> FlowState:
    """One synchronous round of the plain subgradient flow.

    All agents solve at the same allocation snapshot, exchange multipliers,
    and move y against the Laplacian differences. The returned state is
    solved at the new allocation.
    """
    state = _ensure_solved(state, problem, "dense")
    zeta = assemble_subgradient(problem.graph, state.c, "dense", problem.pattern)
    y_next = state.y - params.dt * params.k0 * zeta
    return _advance(problem, "dense", state, y_next, params.dt)


def sparse_step(state: FlowState, params: FlowParams, problem: CoupledProblem) -> FlowState:
    """One round of the sparsity-aware flow.

    Each constraint's allocation entries move only among the agents that
    participate in it; entries of agents outside a constraint stay exactly
    zero, as do all entries of constraints with at most one agent.
    """
    state = _ensure_solved(state, problem, "sparse")
    zeta = assemble_subgradient(problem.graph, state.c, "sparse", problem.pattern)
    y_next = state.y - params.dt * params.k0 * zeta
    return _advance(problem, "sparse", state, y_next, params.dt)


def sign_step(state: FlowState, params: FlowParams, problem: CoupledProblem) -> FlowState:
    """One round of the saturated sign flow (finite-time variant).

    Moves each allocation entry at the fixed rate k0, with a linear ramp of
    the configured slope inside the saturation band to avoid chattering.
    """
    state = _ensure_solved(state, problem, "dense")
    zeta = assemble_subgradient(problem.graph, state.c, "dense", problem.pattern)
    y_next = state.y - params.dt * params.k0 * sat_vec(zeta, params.sat_band, params.sat_slope)
    return _advance(problem, "dense", state, y_next, params.dt)


_STEP_FN = {"dense": dense_step, "sparse": sparse_step, "sign": sign_step}
_MODE = {"dense": "dense", "sparse": "sparse", "sign": "dense"}


def phi_total(problem: CoupledProblem, y: np.ndarray, mode: str = "dense") -> float:
    """Sum of the agents' optimal local values at allocation y."""
    return solve_round(problem, np.asarray(y, dtype=float).ravel(), mode).phi


def auxiliary_scalar_count(pattern: SparsityPattern, variant: str) -> int:
    """Number of allocation scalars a run actually maintains.

    Pinned constraints (at most one agent) cost nothing; the sparse variant
    stores entries only for participating agents, the others one per agent.
    """
    total = 0
    for members in pattern.agents_of_constraint:
        if len(members) <= 1:
            continue
        total += pattern.node_count if variant in ("dense", "sign") else len(members)
    return total


def run_flow(
    problem: CoupledProblem,
    params: FlowParams,
    y0: np.ndarray | None = None,
    *,
    tol_consensus: float | None = None,
    patience: int = 100,
) -> FlowTrace:
    """Run the selected variant for horizon/dt synchronous rounds.

    Records one entry per visited allocation (step 0 through the final step),
    each holding the solved primal stack, total value, coupled-constraint row
    values, and the multiplier disagreement measure. When `tol_consensus` is
    given, the run stops early once disagreement stays at or below it for
    `patience` consecutive records.
    """
    n, m_count = problem.node_count, problem.constraint_count
    if not problem.graph.is_connected():
        raise ValueError("flow runs require a connected communication graph")
    if params.variant == "sparse":
        report = check_consistency(problem.graph, problem.pattern)
        bad = tuple(m for m, ok in enumerate(report, start=1) if not ok)
        if bad:
            raise InconsistentPatternError(bad)

    if y0 is None:
        y0 = np.zeros(n * m_count)
    else:
        y0 = np.asarray(y0, dtype=float).ravel().copy()
        if y0.shape[0] != n * m_count:
            raise ValueError(f"y0 must have length {n * m_count}")

    step_fn = _STEP_FN[params.variant]
    mode = _MODE[params.variant]
    state = _ensure_solved(FlowState(0.0, y0, np.zeros(n * m_count)), problem, mode)

    steps, times, phis, residuals, consensus, ys, xs, cs = [], [], [], [], [], [], [], []

    def record(k: int, st: FlowState) -> float:
        steps.append(k)
        times.append(st.time)
        phis.append(st.phi)
        residuals.append(coupling_residuals(problem, st.x))
        cons = multiplier_consensus(problem.graph, st.c, problem.pattern)
        consensus.append(cons)
        ys.append(st.y.copy())
        xs.append(st.x.copy())
        cs.append(st.c.copy())
        return cons

    early_stop = None
    quiet = 0
    total = params.step_count
    cons = record(0, state)
    if tol_consensus is not None:
        quiet = 1 if cons <= tol_consensus else 0
    for k in range(1, total + 1):
        if tol_consensus is not None and quiet >= patience:
            early_stop = k - 1
            break
        state = step_fn(state, params, problem)
        cons = record(k, state)
        if tol_consensus is not None:
            quiet = quiet + 1 if cons <= tol_consensus else 0

    return FlowTrace(
        variant=params.variant,
        k0=params.k0,
        dt=params.dt,
        steps=np.array(steps, dtype=int),
        times=np.array(times),
        phi=np.array(phis),
        residuals=np.array(residuals),
        consensus=np.array(consensus),
        ys=np.array(ys),
        xs=np.array(xs),
        cs=np.array(cs),
        aux_scalars=auxiliary_scalar_count(problem.pattern, params.variant),
        early_stop_step=early_stop,
    )


def multiplier_sensitivity_bounds(coupling_matrices) -> tuple[float, float]:
    """Extreme eigenvalues of the inverse constraint-direction Gram matrices.

    Ranges over every agent and every nonempty subset of its participating
    constraints; raises GainBoundError on a linearly dependent subset.
    Returns (smallest, largest).
    """
    lam_lo = math.inf
    lam_hi = 0.0
    for agent, mat in enumerate(coupling_matrices, start=1):
        mat = np.asarray(mat, dtype=float)
        active = [m for m in range(1, mat.shape[1] + 1) if np.any(mat[:, m - 1] != 0.0)]
        if len(active) > 20:
            raise ValueError("subset enumeration capped at 20 participating constraints per agent")
        for size in range(1, len(active) + 1):
            for subset in combinations(active, size):
                block = mat[:, [m - 1 for m in subset]]
                gram = block.T @ block
                eigs = np.linalg.eigvalsh(gram)
                if eigs.min() <= 1e-12 * max(1.0, eigs.max()):
                    raise GainBoundError(agent, subset)
                lam_lo = min(lam_lo, 1.0 / eigs.max())
                lam_hi = max(lam_hi, 1.0 / eigs.min())
    if not math.isfinite(lam_lo):
        raise ValueError("no participating constraints found in any agent")
    return lam_lo, lam_hi


def gain_bound(
    coupling_matrices,
    disturbance_bound: float,
    eps: float,
    graph: Graph,
    constraint_count: int | None = None,
) -> float:
    """Smallest sign-flow gain guaranteeing finite-time tracking.

    Evaluates (N * D * sqrt(M) * lam_hi * |L| + eps) / lam_lo where lam_lo and
    lam_hi are the extreme inverse-Gram eigenvalues over all agents and
    constraint subsets and |L| is the Laplacian spectral norm. A zero
    disturbance bound collapses it to eps / lam_lo.
    """
    if eps <= 0:
        raise ValueError("margin eps must be positive")
    if disturbance_bound < 0:
        raise ValueError("disturbance bound must be nonnegative")
    mats = [np.asarray(m, dtype=float) for m in coupling_matrices]
    if constraint_count is None:
        constraint_count = max(m.shape[1] for m in mats)
    lam_lo, lam_hi = multiplier_sensitivity_bounds(mats)
    lap_norm = float(np.linalg.eigvalsh(laplacian(graph)).max())
    n = graph.node_count
    return (n * disturbance_bound * math.sqrt(constraint_count) * lam_hi * lap_norm + eps) / lam_lo
