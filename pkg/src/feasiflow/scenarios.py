"""Built-in experiment scenarios and randomized problem generators.

Two built-ins are compiled in so experiments need no external files:

* ``static9``: nine agents trade three products built from three resources.
  Each agent carries six decision variables (three demands, three supplies),
  a rank-deficient quadratic transport cost plus linear resource prices, and
  three private lower bounds on its production. Three coupling rows force
  the team-wide supply of each resource to cover the team-wide demand.
* ``formation9``: nine planar single-integrators transform a formation while
  two time-varying barriers cap the team's coordinate sums.

The random generators are seeded externally (pass a numpy Generator); the
library itself never touches global random state, so identical seeds give
identical scenarios.
"""

from __future__ import annotations

import math

import numpy as np

from .cbf import AffineBarrier, CbfScenario, FormationSpec, MasState
from .flows import FlowParams
from .network import Graph, SparsityPattern
from .problem import AgentSpec, CoupledProblem, QuadraticCost

BUILTIN_SCENARIOS = ("static9", "formation9")

# supply/demand mixing rows shared by the cost and the coupling constraints
_MIX_ROWS = np.array(
    [
        [0.0, 2.0, 1.0, -1.0, 0.0, 0.0],
        [2.0, 0.0, 1.0, 0.0, -1.0, 0.0],
        [1.0, 1.0, 0.0, 0.0, 0.0, -1.0],
    ]
)

_FORMATION_INITIAL = np.array(
    [4, 6, 2, 8, 0, 10, -2, 8, -4, 6, 2, 12, -2, 12, 4, 14, -4, 14], dtype=float
).reshape(9, 2)
_FORMATION_TARGET = np.array(
    [60, 16, 60, 13, 60, 10, 60, 7, 60, 4, 63, 13, 63, 7, 66, 16, 66, 4], dtype=float
).reshape(9, 2)


def default_nine_node_graph() -> Graph:
    """Ring over agents 1..9 plus chords (1,5) and (3,7)."""
    edges = [(i, i + 1) for i in range(1, 9)] + [(9, 1), (1, 5), (3, 7)]
    return Graph(9, frozenset(edges))


def bound_levels() -> np.ndarray:
    """The (9, 6) table of per-agent levels: entry (i, j) is
    ceil(10*sin(i*j) + 20) with 1-based i, j. Columns 1..3 are production
    floors, columns 4..6 resource prices."""
    out = np.zeros((9, 6))
    for i in range(1, 10):
        for j in range(1, 7):
            out[i - 1, j - 1] = math.ceil(10.0 * math.sin(i * j) + 20.0)
    return out


def build_static9(graph: Graph | None = None) -> CoupledProblem:
    """Nine-agent resource allocation with 3 coupling rows and 27 private
    bounds (constraint m = 3 + 3(i-1) + j is agent i's floor on variable j)."""
    if graph is None:
        graph = default_nine_node_graph()
    if graph.node_count != 9:
        raise ValueError("the static scenario is defined for 9 agents")
    levels = bound_levels()
    m_count = 3 + 27
    hess = 2.0 * (_MIX_ROWS.T @ _MIX_ROWS)
    agents = []
    for i in range(1, 10):
        lin = np.zeros(6)
        lin[3:] = levels[i - 1, 3:]
        coupling = np.zeros((6, m_count))
        offsets = np.zeros(m_count)
        coupling[:, 0:3] = _MIX_ROWS.T
        for j in range(1, 4):
            m = 3 + 3 * (i - 1) + j
            coupling[j - 1, m - 1] = -1.0
            offsets[m - 1] = levels[i - 1, j - 1]
        agents.append(AgentSpec(6, QuadraticCost(hess, lin, 0.0), coupling, offsets))
    return CoupledProblem(tuple(agents), graph)


def build_formation9(
    graph: Graph | None = None,
    mode: str = "distributed",
    horizon: float = 40.0,
    k0: float = 1.0,
    dt: float = 0.01,
    sat_band: float = 0.1,
    sat_slope: float = 10.0,
) -> CbfScenario:
    """Nine-agent formation transition under two coordinate-sum barriers.

    Barrier one caps the sum of all coordinates, barrier two the difference
    between first and second coordinates; both relax linearly in time. The
    leader (agent 3) is the only agent knowing its absolute target.
    """
    if graph is None:
        graph = default_nine_node_graph()
    if graph.node_count != 9:
        raise ValueError("the formation scenario is defined for 9 agents")
    sum_weights = np.full((9, 2), -0.1)
    diff_weights = np.tile([-0.1, 0.1], (9, 1))
    barriers = [
        AffineBarrier(30.0, 1.0, sum_weights),
        AffineBarrier(10.0, 1.0, diff_weights),
    ]
    formation = FormationSpec.from_targets(_FORMATION_TARGET, graph, leader=3)
    params = FlowParams(
        k0=k0, dt=dt, horizon=horizon, variant="sign", sat_band=sat_band, sat_slope=sat_slope
    )
    return CbfScenario(
        graph=graph,
        formation=formation,
        barriers=barriers,
        initial_state=MasState(_FORMATION_INITIAL.copy(), 0.0),
        target_positions=_FORMATION_TARGET.copy(),
        controller_mode=mode,
        flow_params=params,
    )


def random_connected_graph(rng: np.random.Generator, node_count: int, extra_edges: int = 2) -> Graph:
    """Random spanning tree plus a few extra edges; always connected."""
    if node_count < 1:
        raise ValueError("need at least one node")
    edges = set()
    order = list(rng.permutation(node_count) + 1)
    for pos in range(1, node_count):
        j = order[pos]
        i = order[int(rng.integers(0, pos))]
        edges.add((min(i, j), max(i, j)))
    possible = [
        (i, j)
        for i in range(1, node_count + 1)
        for j in range(i + 1, node_count + 1)
        if (i, j) not in edges
    ]
    if possible and extra_edges > 0:
        take = min(extra_edges, len(possible))
        for idx in rng.choice(len(possible), size=take, replace=False):
            edges.add(possible[int(idx)])
    return Graph(node_count, frozenset(edges))


def _connected_subset(rng: np.random.Generator, graph: Graph, size: int) -> frozenset:
    """Grow a connected node subset of the given size by a randomized BFS."""
    start = int(rng.integers(1, graph.node_count + 1))
    chosen = {start}
    frontier = set(graph.neighbors(start))
    while len(chosen) < size and frontier:
        pick = int(rng.choice(sorted(frontier)))
        chosen.add(pick)
        frontier = (frontier | set(graph.neighbors(pick))) - chosen
    return frozenset(chosen)


def random_coupled_problem(
    rng: np.random.Generator,
    n_agents: int | None = None,
    constraint_count: int | None = None,
    dim_range: tuple[int, int] = (1, 3),
    pattern: str = "dense",
    ensure_local_rank: bool = False,
    feasible_margin: float = 1.0,
) -> CoupledProblem:
    """Random strictly convex coupled problem, strictly feasible by anchoring.

    An anchor point is drawn first and the constraint offsets are chosen so
    every coupling row evaluates to -feasible_margin at the anchor, which
    keeps the coupled problem strictly feasible. With ensure_local_rank the
    per-agent constraint directions are resampled until well conditioned
    (full row rank over the agent's own constraints), so local problems stay
    feasible at arbitrary allocations.
    """
    if n_agents is None:
        n_agents = int(rng.integers(2, 6))
    if constraint_count is None:
        constraint_count = int(rng.integers(1, 4))
    if pattern not in ("dense", "random"):
        raise ValueError("pattern must be 'dense' or 'random'")
    graph = random_connected_graph(rng, n_agents)

    members: list[frozenset] = []
    for _ in range(constraint_count):
        if pattern == "dense":
            members.append(frozenset(range(1, n_agents + 1)))
        else:
            size = int(rng.integers(1, n_agents + 1))
            members.append(_connected_subset(rng, graph, size))

    dims = [int(rng.integers(dim_range[0], dim_range[1] + 1)) for _ in range(n_agents)]
    if ensure_local_rank:
        # full row rank over own constraints needs dim >= |M_i|
        for i in range(n_agents):
            own = sum(1 for s in members if (i + 1) in s)
            dims[i] = max(dims[i], own)

    anchors = [rng.normal(size=d) for d in dims]
    mats = []
    for i in range(n_agents):
        own = [m for m in range(1, constraint_count + 1) if (i + 1) in members[m - 1]]
        mat = np.zeros((dims[i], constraint_count))
        while True:
            block = rng.normal(size=(dims[i], len(own)))
            if not own:
                break
            sv = np.linalg.svd(block, compute_uv=False)
            if not ensure_local_rank or sv.min() > 0.3:
                break
        for k, m in enumerate(own):
            mat[:, m - 1] = block[:, k]
        mats.append(mat)

    offsets = np.zeros((n_agents, constraint_count))
    for m in range(1, constraint_count + 1):
        crowd = sorted(members[m - 1])
        total = sum(float(mats[i - 1][:, m - 1] @ anchors[i - 1]) for i in crowd)
        shares = rng.normal(size=len(crowd))
        shares -= shares.mean()
        target = -feasible_margin - total
        for k, i in enumerate(crowd):
            offsets[i - 1, m - 1] = target / len(crowd) + shares[k]
            if offsets[i - 1, m - 1] == 0.0:
                offsets[i - 1, m - 1] = 1e-9  # keep membership visible to the pattern

    agents = []
    for i in range(n_agents):
        basis = rng.normal(size=(dims[i], dims[i]))
        hess = basis.T @ basis + 0.5 * np.eye(dims[i])
        lin = rng.normal(size=dims[i])
        agents.append(AgentSpec(dims[i], QuadraticCost(hess, lin, 0.0), mats[i], offsets[i]))
    problem = CoupledProblem(tuple(agents), graph, SparsityPattern(n_agents, tuple(members)))
    problem.anchor = np.concatenate(anchors)  # type: ignore[attr-defined]
    return problem


def random_identity_qp(
    rng: np.random.Generator, d_max: int = 4, m_max: int = 4
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random identity-Hessian local QP data (coupling, x_nom, shift).

    The constraint directions are near-orthogonal by construction: resampled
    until the multiplier iteration's linear part is an infinity-norm
    contraction (coefficient < 0.9), so the fixed-point route is guaranteed
    to converge and can be cross-checked against the active-set route.
    """
    while True:
        d = int(rng.integers(2, d_max + 1))
        m = int(rng.integers(1, min(m_max, d) + 1))
        base = np.linalg.qr(rng.normal(size=(d, d)))[0][:, :m]
        scales = rng.uniform(0.5, 2.0, size=m)
        mat = base * scales + 0.05 * rng.normal(size=(d, m))
        gram = mat.T @ mat
        diag = np.diag(gram)
        if diag.min() <= 1e-9:
            continue
        off = np.abs(gram - np.diag(diag)).sum(axis=1)
        if (off / diag).max() < 0.9:
            break
    x_nom = rng.normal(size=d)
    shift = -(mat.T @ x_nom) + rng.uniform(-1.0, 1.0, size=m)
    return mat, x_nom, shift
