"""Communication graphs, Laplacian algebra, constraint sparsity, and stacking orders.

Agents are labeled 1..N and constraints 1..M throughout the package; matrix and
vector positions are label minus one.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Graph:
    """Undirected communication graph on nodes 1..node_count.

    Edges are unordered pairs without self-loops; duplicates collapse. The
    distributed algorithms in this package require a connected graph.
    """

    node_count: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not isinstance(self.node_count, int) or self.node_count < 1:
            raise ValueError(f"node_count must be a positive integer, got {self.node_count!r}")
        normalized = set()
        for edge in self.edges:
            try:
                i, j = edge
            except (TypeError, ValueError):
                raise ValueError(f"edge {edge!r} is not a pair") from None
            if not (isinstance(i, (int, np.integer)) and isinstance(j, (int, np.integer))):
                raise ValueError(f"edge {edge!r} has non-integer endpoints")
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop ({i}, {j}) is not allowed")
            if not (1 <= i <= self.node_count and 1 <= j <= self.node_count):
                raise ValueError(
                    f"edge ({i}, {j}) out of range for {self.node_count} nodes (labels are 1-based)"
                )
            normalized.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(normalized))
        neighbor_sets: dict[int, set[int]] = {i: set() for i in range(1, self.node_count + 1)}
        for i, j in self.edges:
            neighbor_sets[i].add(j)
            neighbor_sets[j].add(i)
        object.__setattr__(
            self, "_neighbors", {i: tuple(sorted(s)) for i, s in neighbor_sets.items()}
        )

    def neighbors(self, node: int) -> tuple[int, ...]:
        """Sorted neighbor labels of `node`."""
        return self._neighbors[node]  # type: ignore[attr-defined]

    def degree(self, node: int) -> int:
        return len(self.neighbors(node))

    def is_connected(self) -> bool:
        """Breadth-first connectivity check (exact, no tolerance)."""
        if self.node_count == 1:
            return True
        seen = {1}
        queue = deque([1])
        while queue:
            u = queue.popleft()
            for v in self.neighbors(u):
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.node_count


def laplacian(graph: Graph) -> np.ndarray:
    """Dense combinatorial Laplacian: degree on the diagonal, -1 per edge."""
    n = graph.node_count
    lap = np.zeros((n, n))
    for i, j in graph.edges:
        lap[i - 1, j - 1] = -1.0
        lap[j - 1, i - 1] = -1.0
        lap[i - 1, i - 1] += 1.0
        lap[j - 1, j - 1] += 1.0
    return lap


def laplacian_row(graph: Graph, node: int) -> np.ndarray:
    """Row of the Laplacian for one node, without materializing the matrix."""
    row = np.zeros(graph.node_count)
    nbrs = graph.neighbors(node)
    row[node - 1] = float(len(nbrs))
    for j in nbrs:
        row[j - 1] = -1.0
    return row


def induced_subgraph_laplacian(graph: Graph, nodes: Iterable[int]) -> np.ndarray:
    """Laplacian of the subgraph keeping only edges internal to `nodes`.

    The result is node_count x node_count with zero rows and columns for
    excluded nodes, so it acts on full-length vectors.
    """
    members = set(int(v) for v in nodes)
    for v in members:
        if not (1 <= v <= graph.node_count):
            raise ValueError(f"node {v} out of range 1..{graph.node_count}")
    n = graph.node_count
    lap = np.zeros((n, n))
    for i, j in graph.edges:
        if i in members and j in members:
            lap[i - 1, j - 1] = -1.0
            lap[j - 1, i - 1] = -1.0
            lap[i - 1, i - 1] += 1.0
            lap[j - 1, j - 1] += 1.0
    return lap


@dataclass(frozen=True)
class SparsityPattern:
    """Which agents participate in which coupling constraint.

    `agents_of_constraint[m-1]` is the set of agents whose contribution to
    constraint m is not identically zero. The transposed view
    `constraints_of_agent` is derived, never free data.
    """

    node_count: int
    agents_of_constraint: tuple[frozenset, ...]
    constraints_of_agent: tuple[frozenset, ...] = field(init=False)

    def __post_init__(self) -> None:
        sets = []
        for m, members in enumerate(self.agents_of_constraint, start=1):
            fs = frozenset(int(v) for v in members)
            for v in fs:
                if not (1 <= v <= self.node_count):
                    raise ValueError(f"constraint {m}: agent {v} out of range 1..{self.node_count}")
            sets.append(fs)
        object.__setattr__(self, "agents_of_constraint", tuple(sets))
        per_agent: list[set[int]] = [set() for _ in range(self.node_count)]
        for m, members in enumerate(sets, start=1):
            for v in members:
                per_agent[v - 1].add(m)
        object.__setattr__(self, "constraints_of_agent", tuple(frozenset(s) for s in per_agent))

    @property
    def constraint_count(self) -> int:
        return len(self.agents_of_constraint)

    def is_singleton(self, m: int) -> bool:
        """True when constraint m touches at most one agent."""
        return len(self.agents_of_constraint[m - 1]) <= 1

    def is_dense(self) -> bool:
        """True when every constraint involves every agent."""
        full = frozenset(range(1, self.node_count + 1))
        return all(members == full for members in self.agents_of_constraint)

    def relevant_neighbors(self, graph: Graph, agent: int, m: int) -> tuple[int, ...]:
        """Neighbors of `agent` that also participate in constraint m."""
        members = self.agents_of_constraint[m - 1]
        return tuple(j for j in graph.neighbors(agent) if j in members)


def check_consistency(graph: Graph, pattern: SparsityPattern) -> tuple[bool, ...]:
    """Per constraint, whether the subgraph induced by its agents is connected.

    Constraints touching zero or one agent count as consistent: they need no
    inter-agent exchange at all.
    """
    if graph.node_count != pattern.node_count:
        raise ValueError("graph and pattern disagree on the number of agents")
    report = []
    for members in pattern.agents_of_constraint:
        if len(members) <= 1:
            report.append(True)
            continue
        start = next(iter(members))
        seen = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in graph.neighbors(u):
                if v in members and v not in seen:
                    seen.add(v)
                    queue.append(v)
        report.append(len(seen) == len(members))
    return tuple(report)


@dataclass(frozen=True)
class Permutation:
    """Bijection on vector positions, stored in gather form.

    `apply(v)[k] == v[gather[k]]`; composing with the inverse is the identity.
    """

    size: int
    gather: np.ndarray

    def __post_init__(self) -> None:
        g = np.asarray(self.gather, dtype=np.intp)
        if g.shape != (self.size,) or not np.array_equal(np.sort(g), np.arange(self.size)):
            raise ValueError("gather must be a permutation of 0..size-1")
        g = g.copy()
        g.setflags(write=False)
        object.__setattr__(self, "gather", g)

    def apply(self, v: Sequence[float] | np.ndarray) -> np.ndarray:
        arr = np.asarray(v)
        if arr.shape[0] != self.size:
            raise ValueError(f"expected length {self.size}, got {arr.shape[0]}")
        return arr[self.gather]

    def inverse(self) -> "Permutation":
        return Permutation(self.size, np.argsort(self.gather))

    def matrix(self) -> np.ndarray:
        """Dense 0/1 matrix J with J @ v == apply(v)."""
        return np.eye(self.size)[self.gather]


def agents_to_constraints_perm(n_agents: int, n_constraints: int) -> Permutation:
    """Reordering from agent-major to constraint-major stacking.

    Agent-major places agent i's M entries contiguously; constraint-major
    places constraint m's N entries contiguously. Applying the permutation to
    an agent-major stack yields the constraint-major stack.
    """
    if n_agents < 1 or n_constraints < 1:
        raise ValueError("need at least one agent and one constraint")
    agent_major = np.arange(n_agents * n_constraints).reshape(n_agents, n_constraints)
    return Permutation(n_agents * n_constraints, agent_major.T.ravel())
