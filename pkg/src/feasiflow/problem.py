"""Constraint-coupled quadratic programs: problem model, centralized oracle, and
the feasibility-preserving lift onto per-agent allocation variables.

Each agent i owns a convex quadratic cost and a slice (columns of A_i, offsets
b_i) of M shared inequality constraints

    sum_i (a_i^m . x_i + b_i^m) <= 0,    m = 1..M.

Allocation vectors y (length N*M, constraint-major) redistribute constraint
budget across agents through Laplacian differences, turning each coupled row
into N local rows whose sum reproduces the original row exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .network import Graph, SparsityPattern, laplacian

KKT_TOL = 1e-8


class CentralizedSolveError(RuntimeError):
    """Raised when the stacked problem is infeasible, unbounded, or the solver fails.

    `reason` is one of "infeasible", "unbounded", "numerical".
    """

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"centralized solve failed ({reason}){': ' + detail if detail else ''}")


@dataclass(frozen=True)
class QuadraticCost:
    """Convex quadratic 0.5 x'Qx + q'x + const with Q symmetric PSD."""

    hessian: np.ndarray
    linear: np.ndarray
    constant: float = 0.0

    def __post_init__(self) -> None:
        hess = np.array(self.hessian, dtype=float)
        lin = np.array(self.linear, dtype=float).ravel()
        if hess.ndim != 2 or hess.shape[0] != hess.shape[1]:
            raise ValueError(f"hessian must be square, got shape {hess.shape}")
        if lin.shape[0] != hess.shape[0]:
            raise ValueError("linear term length does not match hessian size")
        scale = max(1.0, float(np.abs(hess).max(initial=0.0)))
        if np.abs(hess - hess.T).max(initial=0.0) > 1e-10 * scale:
            raise ValueError("hessian must be symmetric")
        hess = 0.5 * (hess + hess.T)
        eigs = np.linalg.eigvalsh(hess)
        if eigs.min(initial=0.0) < -1e-8 * scale:
            raise ValueError(f"hessian must be positive semidefinite (min eigenvalue {eigs.min()})")
        hess.setflags(write=False)
        lin.setflags(write=False)
        object.__setattr__(self, "hessian", hess)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "constant", float(self.constant))

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]

    def value(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.hessian @ x + self.linear @ x + self.constant)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.hessian @ np.asarray(x, dtype=float) + self.linear


@dataclass(frozen=True)
class AgentSpec:
    """One agent's private data: cost, constraint columns, constraint offsets.

    `coupling_matrix` is d_i x M with column m holding a_i^m; a column that is
    exactly zero together with a zero offset means the agent does not
    participate in that constraint.
    """

    dim: int
    cost: QuadraticCost
    coupling_matrix: np.ndarray
    coupling_offsets: np.ndarray

    def __post_init__(self) -> None:
        mat = np.array(self.coupling_matrix, dtype=float)
        off = np.array(self.coupling_offsets, dtype=float).ravel()
        if self.cost.dim != self.dim:
            raise ValueError(f"cost dimension {self.cost.dim} != agent dim {self.dim}")
        if mat.ndim != 2 or mat.shape[0] != self.dim:
            raise ValueError(f"coupling_matrix must be {self.dim} x M, got shape {mat.shape}")
        if off.shape[0] != mat.shape[1]:
            raise ValueError("coupling_offsets length does not match constraint count")
        mat.setflags(write=False)
        off.setflags(write=False)
        object.__setattr__(self, "coupling_matrix", mat)
        object.__setattr__(self, "coupling_offsets", off)

    @property
    def constraint_count(self) -> int:
        return self.coupling_matrix.shape[1]

    @property
    def constraint_set(self) -> frozenset:
        """Labels m with a nonzero column or a nonzero offset."""
        cols = np.any(self.coupling_matrix != 0.0, axis=0)
        offs = self.coupling_offsets != 0.0
        return frozenset(int(m) + 1 for m in np.flatnonzero(cols | offs))


@dataclass
class CoupledProblem:
    """N agents plus the communication graph; the global coupled program."""

    agents: tuple
    graph: Graph
    pattern: SparsityPattern = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.agents = tuple(self.agents)
        if len(self.agents) != self.graph.node_count:
            raise ValueError(
                f"{len(self.agents)} agents for a {self.graph.node_count}-node graph"
            )
        counts = {a.constraint_count for a in self.agents}
        if len(counts) != 1:
            raise ValueError(f"agents disagree on the constraint count: {sorted(counts)}")
        if self.pattern is None:
            m_count = self.agents[0].constraint_count
            sets = [set() for _ in range(m_count)]
            for i, agent in enumerate(self.agents, start=1):
                for m in agent.constraint_set:
                    sets[m - 1].add(i)
            self.pattern = SparsityPattern(len(self.agents), tuple(frozenset(s) for s in sets))
        if self.pattern.constraint_count != self.agents[0].constraint_count:
            raise ValueError("pattern constraint count does not match the agents")
        self._laplacian: np.ndarray | None = None

    @property
    def node_count(self) -> int:
        return len(self.agents)

    @property
    def constraint_count(self) -> int:
        return self.agents[0].constraint_count

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(a.dim for a in self.agents)

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    def offsets(self) -> tuple[int, ...]:
        """Start position of each agent's block in the stacked primal vector."""
        out, acc = [], 0
        for a in self.agents:
            out.append(acc)
            acc += a.dim
        return tuple(out)

    def split(self, x: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != self.total_dim:
            raise ValueError(f"expected stacked vector of length {self.total_dim}, got {x.shape[0]}")
        parts, pos = [], 0
        for a in self.agents:
            parts.append(x[pos : pos + a.dim])
            pos += a.dim
        return parts

    def laplacian(self) -> np.ndarray:
        if self._laplacian is None:
            self._laplacian = laplacian(self.graph)
        return self._laplacian


def coupling_residuals(problem: CoupledProblem, x: np.ndarray) -> np.ndarray:
    """Row values sum_i a_i^m . x_i + b_i^m; nonpositive means feasible."""
    parts = problem.split(x)
    out = np.zeros(problem.constraint_count)
    for agent, xi in zip(problem.agents, parts):
        out += agent.coupling_matrix.T @ xi + agent.coupling_offsets
    return out


def stack_quadratic(problem: CoupledProblem) -> tuple[np.ndarray, np.ndarray, float]:
    """Block-diagonal Hessian, stacked linear term, and summed constants."""
    n = problem.total_dim
    hess = np.zeros((n, n))
    lin = np.zeros(n)
    const = 0.0
    pos = 0
    for agent in problem.agents:
        hess[pos : pos + agent.dim, pos : pos + agent.dim] = agent.cost.hessian
        lin[pos : pos + agent.dim] = agent.cost.linear
        const += agent.cost.constant
        pos += agent.dim
    return hess, lin, const


def stack_constraints(problem: CoupledProblem) -> tuple[np.ndarray, np.ndarray]:
    """Rows G and offsets s of the coupled constraints G x + s <= 0."""
    rows = np.zeros((problem.constraint_count, problem.total_dim))
    offs = np.zeros(problem.constraint_count)
    pos = 0
    for agent in problem.agents:
        rows[:, pos : pos + agent.dim] = agent.coupling_matrix.T
        offs += agent.coupling_offsets
        pos += agent.dim
    return rows, offs


def linear_feasibility(rows: np.ndarray, offsets: np.ndarray) -> tuple[bool, float, int | None]:
    """Classify the polyhedron {x : rows @ x + offsets <= 0}.

    Returns (feasible, best achievable worst-row value, index of the worst row
    at that point). Solved as a min-max linear program.
    """
    rows = np.asarray(rows, dtype=float)
    offsets = np.asarray(offsets, dtype=float).ravel()
    if rows.shape[0] == 0:
        return True, -np.inf, None
    n = rows.shape[1]
    # variables (x, t): minimize t subject to rows @ x + offsets <= t
    c = np.zeros(n + 1)
    c[-1] = 1.0
    a_ub = np.hstack([rows, -np.ones((rows.shape[0], 1))])
    bounds = [(None, None)] * n + [(-1.0, None)]
    res = linprog(c, A_ub=a_ub, b_ub=-offsets, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"feasibility subproblem failed: {res.message}")
    worst = float(res.fun)
    if worst <= 1e-9:
        return True, worst, None
    row_vals = rows @ res.x[:n] + offsets
    return False, worst, int(np.argmax(row_vals)) + 1


def _is_unbounded(hess, lin, rows, offsets) -> bool:
    """A convex QP is unbounded below iff some direction d has Qd = 0,
    rows @ d <= 0, and q.d < 0; checked with a box-bounded linear program."""
    n = hess.shape[0]
    res = linprog(
        lin,
        A_ub=rows if rows.shape[0] else None,
        b_ub=np.zeros(rows.shape[0]) if rows.shape[0] else None,
        A_eq=hess,
        b_eq=np.zeros(n),
        bounds=[(-1.0, 1.0)] * n,
        method="highs",
    )
    return res.status == 0 and res.fun < -1e-9


def _kkt_polish(hess, lin, rows, offsets, x0, duals0):
    """Re-solve the KKT equality system on the estimated active set and
    verify the full first-order conditions to tight tolerance."""
    n = hess.shape[0]
    m = rows.shape[0]
    scale = max(1.0, float(np.abs(x0).max(initial=0.0)))
    best = None
    for act_tol in (1e-7, 1e-6, 1e-5):
        resid = rows @ x0 + offsets
        active = np.flatnonzero((resid >= -act_tol * scale) | (duals0 >= act_tol))
        ga = rows[active]
        k = active.size
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = hess
        kkt[:n, n:] = ga.T
        kkt[n:, :n] = ga
        rhs = np.concatenate([-lin, -offsets[active]])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        x = sol[:n]
        lam = np.maximum(sol[n:], 0.0)
        full_lam = np.zeros(m)
        full_lam[active] = lam
        r = rows @ x + offsets
        residual = max(
            float(np.abs(hess @ x + lin + rows.T @ full_lam).max(initial=0.0)),
            float(np.maximum(r, 0.0).max(initial=0.0)),
            float(np.abs(full_lam * r).max(initial=0.0)),
        )
        if best is None or residual < best[2]:
            best = (x, full_lam, residual)
        if residual <= KKT_TOL * scale:
            break
    return best


def centralized_solve(problem: CoupledProblem) -> tuple[np.ndarray, float, np.ndarray]:
    """Solve the stacked coupled program as one convex QP.

    Returns (x, optimal cost, constraint multipliers). Uses an interior-point
    solve followed by an active-set polish so the KKT residual lands at or
    below 1e-8. Infeasibility and unboundedness are classified exactly with
    auxiliary linear programs.
    """
    from cvxopt import matrix as cvx_matrix
    from cvxopt import solvers as cvx_solvers

    hess, lin, const = stack_quadratic(problem)
    rows, offsets = stack_constraints(problem)

    feasible, worst, worst_row = linear_feasibility(rows, offsets)
    if not feasible:
        raise CentralizedSolveError(
            "infeasible", f"row {worst_row} violated by at least {worst:.3e} at the best point"
        )
    if _is_unbounded(hess, lin, rows, offsets):
        raise CentralizedSolveError("unbounded", "descent direction in the constraint recession cone")

    options = {"show_progress": False, "abstol": 1e-10, "reltol": 1e-10, "feastol": 1e-9}
    try:
        sol = cvx_solvers.qp(
            cvx_matrix(hess),
            cvx_matrix(lin),
            cvx_matrix(rows),
            cvx_matrix(-offsets),
            options=options,
        )
    except (ValueError, ArithmeticError, ZeroDivisionError) as exc:
        raise CentralizedSolveError("numerical", str(exc)) from exc
    if sol["status"] != "optimal":
        raise CentralizedSolveError("numerical", f"interior-point status {sol['status']!r}")
    x0 = np.asarray(sol["x"]).ravel()
    duals0 = np.asarray(sol["z"]).ravel() if rows.shape[0] else np.zeros(0)

    x, multipliers, residual = _kkt_polish(hess, lin, rows, offsets, x0, duals0)
    scale = max(1.0, float(np.abs(x).max(initial=0.0)))
    if residual > KKT_TOL * scale:
        raise CentralizedSolveError("numerical", f"KKT residual {residual:.3e} after polish")
    cost = float(0.5 * x @ hess @ x + lin @ x + const)
    return x, cost, multipliers


def lift_feasible_point(problem: CoupledProblem, x_feas: np.ndarray) -> np.ndarray:
    """Allocation vector y making every local row of the decomposed problem hold.

    For each constraint m with per-agent contributions v_i = a_i^m . x_i + b_i^m
    the returned block solves L y^m = mean(v) - v (minimum-norm solution), so
    each local row evaluates to the common mean, which is nonpositive whenever
    x_feas satisfies the coupled row.
    """
    if not problem.graph.is_connected():
        raise ValueError("lift requires a connected graph")
    residuals = coupling_residuals(problem, x_feas)
    worst = float(residuals.max(initial=-np.inf))
    if worst > 1e-10:
        raise ValueError(f"x_feas violates coupling constraint by {worst:.3e}")

    lap = problem.laplacian()
    eigvals, eigvecs = np.linalg.eigh(lap)
    cut = 1e-10 * max(1.0, float(eigvals.max()))
    inv = np.zeros_like(eigvals)
    inv[eigvals > cut] = 1.0 / eigvals[eigvals > cut]

    parts = problem.split(x_feas)
    n, m_count = problem.node_count, problem.constraint_count
    y = np.zeros(n * m_count)
    contrib = np.zeros((n, m_count))
    for i, (agent, xi) in enumerate(zip(problem.agents, parts)):
        contrib[i] = agent.coupling_matrix.T @ xi + agent.coupling_offsets
    for m in range(m_count):
        v = contrib[:, m]
        rhs = v.mean() - v
        ym = eigvecs @ (inv * (eigvecs.T @ rhs))
        if np.abs(lap @ ym - rhs).max(initial=0.0) > 1e-9 * max(1.0, np.abs(rhs).max(initial=0.0)):
            raise ValueError(f"constraint {m + 1}: right-hand side outside the Laplacian range")
        y[m * n : (m + 1) * n] = ym
    return y


def slater_rank_flag(problem: CoupledProblem, mode: str = "dense") -> tuple[bool, ...]:
    """Per-agent sufficient condition for local feasibility at every allocation.

    Dense mode requires each A_i to have numerical rank M; sparse mode only
    rank |M_i| over the agent's own constraint set.
    """
    if mode not in ("dense", "sparse"):
        raise ValueError(f"mode must be 'dense' or 'sparse', got {mode!r}")
    flags = []
    for agent in problem.agents:
        mat = agent.coupling_matrix
        svals = np.linalg.svd(mat, compute_uv=False) if mat.size else np.zeros(0)
        rank = int(np.sum(svals > 1e-10 * max(1.0, svals.max(initial=0.0))))
        target = agent.constraint_count if mode == "dense" else len(agent.constraint_set)
        flags.append(rank == target)
    return tuple(flags)
