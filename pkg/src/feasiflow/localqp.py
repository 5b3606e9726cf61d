"""Per-agent quadratic programs with allocation-shifted constraints.

Each agent repeatedly solves

    min 0.5 x'Qx + q'x   s.t.   a_i^m . x + sigma_m <= 0  for m in its set,

where the shift sigma_m bundles the agent's constraint offset with Laplacian
differences of the allocation vector. The solver enumerates candidate active
sets (warm set first), solves the corresponding KKT equality system, and
certifies primal feasibility, dual nonnegativity, and stationarity before
accepting, which is exact for convex problems. A separate algebraic
fixed-point solver covers the identity-Hessian case used by the safety-filter
application.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .network import Graph, SparsityPattern
from .problem import AgentSpec, linear_feasibility

CONSISTENCY_TOL = 1e-8
FEAS_TOL = 1e-8
DUAL_TOL = 1e-8
MAX_ENUM_ROWS = 18


class LocalInfeasibleError(RuntimeError):
    """The agent's feasible region is empty at the current allocation."""

    def __init__(self, certificate: str):
        self.certificate = certificate
        super().__init__(f"local problem infeasible: {certificate}")


class UnboundedLocalError(RuntimeError):
    """The agent's cost decreases without bound over its feasible region."""


class FixedPointError(RuntimeError):
    """The multiplier fixed-point iteration did not reach tolerance."""


@dataclass(frozen=True)
class LocalProblem:
    """One agent's QP at a fixed allocation: constraint labels plus shifts.

    `shift[k]` already contains the offset b_i^m for label `active_set[k]`,
    on top of the allocation differences.
    """

    agent: AgentSpec
    active_set: tuple
    shift: np.ndarray

    def __post_init__(self) -> None:
        labels = tuple(int(m) for m in self.active_set)
        shift = np.array(self.shift, dtype=float).ravel()
        if len(labels) != shift.shape[0]:
            raise ValueError("shift length must match the active constraint set")
        m_count = self.agent.constraint_count
        for m in labels:
            if not (1 <= m <= m_count):
                raise ValueError(f"constraint label {m} out of range 1..{m_count}")
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate constraint labels")
        shift.setflags(write=False)
        object.__setattr__(self, "active_set", labels)
        object.__setattr__(self, "shift", shift)


@dataclass(frozen=True)
class LocalSolution:
    """Primal-dual optimizer of one local QP.

    `multipliers` is aligned with the agent's full constraint list; entries
    for labels outside the problem's active set are zero.
    """

    primal: np.ndarray
    multipliers: np.ndarray
    value: float
    kkt_residual: float


def constraint_shift(
    y: np.ndarray,
    agent: int,
    spec: AgentSpec,
    graph: Graph,
    mode: str = "dense",
    pattern: SparsityPattern | None = None,
) -> tuple[tuple, np.ndarray]:
    """Constraint labels and shift entries for one agent at allocation y.

    y is constraint-major (block m holds one entry per agent). Dense mode
    shifts every constraint by the agent's full Laplacian row; sparse mode
    keeps only the agent's own constraints and sums allocation differences
    over neighbors that share each constraint.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = graph.node_count
    m_count = spec.constraint_count
    if y.shape[0] != n * m_count:
        raise ValueError(f"expected allocation of length {n * m_count}, got {y.shape[0]}")
    if mode == "dense":
        labels = tuple(range(1, m_count + 1))
        neighbor_rows = {m: graph.neighbors(agent) for m in labels}
    elif mode == "sparse":
        if pattern is None:
            raise ValueError("sparse mode needs the sparsity pattern")
        labels = tuple(sorted(spec.constraint_set))
        neighbor_rows = {m: pattern.relevant_neighbors(graph, agent, m) for m in labels}
    else:
        raise ValueError(f"mode must be 'dense' or 'sparse', got {mode!r}")

    shift = np.zeros(len(labels))
    for k, m in enumerate(labels):
        block = y[(m - 1) * n : m * n]
        row = np.zeros(n)
        nbrs = neighbor_rows[m]
        row[agent - 1] = float(len(nbrs))
        for j in nbrs:
            row[j - 1] = -1.0
        shift[k] = float(np.dot(block, row)) + spec.coupling_offsets[m - 1]
    return labels, shift


def _subset_order(n_rows: int, warm_mask: int) -> list[int]:
    subsets = list(range(1 << n_rows))
    subsets.sort(key=lambda s: ((s ^ warm_mask).bit_count(), s.bit_count()))
    return subsets


def _kkt_try(hess, lin, rows_g, shift_s, subset_idx):
    """Solve the equality KKT system for one candidate active set.

    Returns (x, duals, consistent). Inconsistent systems mean no stationary
    point exists with exactly these rows active.
    """
    d = hess.shape[0]
    k = len(subset_idx)
    kkt = np.zeros((d + k, d + k))
    kkt[:d, :d] = hess
    rhs = np.concatenate([-lin, -shift_s[subset_idx]]) if k else -lin
    if k:
        ga = rows_g[subset_idx]
        kkt[:d, d:] = ga.T
        kkt[d:, :d] = ga
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    gap = kkt @ sol - rhs
    scale = max(1.0, float(np.abs(rhs).max(initial=0.0)), float(np.abs(sol).max(initial=0.0)))
    consistent = float(np.abs(gap).max(initial=0.0)) <= CONSISTENCY_TOL * scale
    return sol[:d], sol[d:], consistent


def _nullspace(mat: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the right null space (columns)."""
    if mat.size == 0:
        return np.eye(mat.shape[1])
    _, svals, vt = np.linalg.svd(mat)
    tol = max(mat.shape) * np.finfo(float).eps * max(1.0, svals.max(initial=0.0))
    rank = int(np.sum(svals > tol))
    return vt[rank:].T


def _repair_degenerate(hess, rows_g, shift_s, x, subset_idx):
    """A singular-but-consistent KKT system fixes x only up to directions in
    null(Q) and the active rows; search that affine set for a point that also
    satisfies the inactive rows."""
    from scipy.optimize import linprog

    basis = _nullspace(np.vstack([hess, rows_g[subset_idx]]) if len(subset_idx) else hess)
    if basis.shape[1] == 0:
        return None
    inactive = [r for r in range(rows_g.shape[0]) if r not in set(subset_idx)]
    if not inactive:
        return x
    a_ub = rows_g[inactive] @ basis
    b_ub = -(rows_g[inactive] @ x + shift_s[inactive])
    res = linprog(
        np.zeros(basis.shape[1]),
        A_ub=a_ub,
        b_ub=b_ub,
        bounds=[(None, None)] * basis.shape[1],
        method="highs",
    )
    if res.status != 0:
        return None
    return x + basis @ res.x


def _tie_break_multipliers(hess, lin, rows_g, shift_s, x, reference):
    """Pick the optimal multiplier vector nearest the reference.

    On the optimal dual face (tight rows T, stationarity residual r) this
    solves min |c - reference|^2 s.t. sum_k c_k g_k = r, c >= 0 by enumerating
    zero patterns, which is exact for the small row counts used here.
    """
    n_rows = rows_g.shape[0]
    vals = rows_g @ x + shift_s
    scale = max(1.0, float(np.abs(x).max(initial=0.0)))
    tight = np.flatnonzero(np.abs(vals) <= 10 * FEAS_TOL * scale)
    target = -(hess @ x + lin)
    target_scale = max(1.0, float(np.abs(target).max(initial=0.0)))
    if tight.size == 0:
        if np.abs(target).max(initial=0.0) > CONSISTENCY_TOL * target_scale:
            return None
        return np.zeros(n_rows)

    basis = rows_g[tight].T
    svals = np.linalg.svd(basis, compute_uv=False)
    full_rank = int(np.sum(svals > 1e-10 * max(1.0, svals.max(initial=0.0)))) == tight.size
    if full_rank:
        # unique multipliers on this tight set; no face to search
        ct, *_ = np.linalg.lstsq(basis, target, rcond=None)
        if (ct >= -DUAL_TOL).all() and np.abs(basis @ ct - target).max(initial=0.0) <= (
            CONSISTENCY_TOL * target_scale
        ):
            cand = np.zeros(n_rows)
            cand[tight] = np.maximum(ct, 0.0)
            return cand

    # degenerate dual face: enumerate zero patterns and keep the candidate
    # closest to the reference, which is the exact projection
    best = None
    for drop in range(tight.size + 1):
        for zeros in combinations(range(tight.size), drop):
            free = [k for k in range(tight.size) if k not in zeros]
            cols = rows_g[tight[free]].T if free else np.zeros((hess.shape[0], 0))
            nf = len(free)
            kkt = np.zeros((nf + hess.shape[0], nf + hess.shape[0]))
            kkt[:nf, :nf] = np.eye(nf)
            kkt[:nf, nf:] = cols.T
            kkt[nf:, :nf] = cols
            rhs = np.concatenate([reference[tight[free]], target])
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            cf = sol[:nf]
            if (cf < -DUAL_TOL).any():
                continue
            if np.abs(cols @ cf - target).max(initial=0.0) > CONSISTENCY_TOL * target_scale:
                continue
            cand = np.zeros(n_rows)
            cand[tight[free]] = np.maximum(cf, 0.0)
            dist = float(np.sum((cand - reference) ** 2))
            if best is None or dist < best[0] - 1e-15:
                best = (dist, cand)
    return best[1] if best is not None else None


def solve_local(problem: LocalProblem, warm_start: np.ndarray | None = None) -> LocalSolution:
    """Certified active-set solve of one agent's QP.

    Candidate active sets are tried warm-set first; the first candidate whose
    KKT point passes feasibility and dual checks is the global optimum. Among
    degenerate multipliers the vector nearest the warm start is returned
    (nearest zero without one). Raises LocalInfeasibleError or
    UnboundedLocalError with a certificate when no optimum exists.
    """
    spec = problem.agent
    hess, lin = spec.cost.hessian, spec.cost.linear
    d = spec.dim
    labels = problem.active_set
    shift = problem.shift

    cols = [spec.coupling_matrix[:, m - 1] for m in labels]
    nonzero = [k for k, g in enumerate(cols) if np.any(g != 0.0)]
    for k in range(len(labels)):
        if k not in nonzero and shift[k] > FEAS_TOL:
            raise LocalInfeasibleError(
                f"constraint {labels[k]} has no primal variable and positive offset {shift[k]:.3e}"
            )
    rows_g = np.array([cols[k] for k in nonzero]) if nonzero else np.zeros((0, d))
    shift_s = shift[nonzero] if nonzero else np.zeros(0)
    n_rows = rows_g.shape[0]
    if n_rows > MAX_ENUM_ROWS:
        raise ValueError(f"active-set enumeration capped at {MAX_ENUM_ROWS} rows, got {n_rows}")

    reference = np.zeros(n_rows)
    warm_mask = 0
    if warm_start is not None:
        warm = np.asarray(warm_start, dtype=float).ravel()
        if warm.shape[0] != spec.constraint_count:
            raise ValueError("warm start must have one entry per constraint label")
        for pos, k in enumerate(nonzero):
            reference[pos] = max(warm[labels[k] - 1], 0.0)
            if reference[pos] > 1e-9:
                warm_mask |= 1 << pos

    accepted = None
    degenerate_candidates = []
    for subset in _subset_order(n_rows, warm_mask):
        subset_idx = [k for k in range(n_rows) if subset >> k & 1]
        x, c_act, consistent = _kkt_try(hess, lin, rows_g, shift_s, subset_idx)
        if not consistent:
            continue
        if (c_act < -DUAL_TOL).any():
            continue
        vals = rows_g @ x + shift_s
        scale = max(1.0, float(np.abs(x).max(initial=0.0)))
        if vals.max(initial=0.0) > FEAS_TOL * scale:
            degenerate_candidates.append(subset_idx)
            continue
        accepted = x
        break

    if accepted is None:
        for subset_idx in degenerate_candidates:
            x, c_act, _ = _kkt_try(hess, lin, rows_g, shift_s, subset_idx)
            fixed = _repair_degenerate(hess, rows_g, shift_s, x, subset_idx)
            if fixed is None:
                continue
            vals = rows_g @ fixed + shift_s
            scale = max(1.0, float(np.abs(fixed).max(initial=0.0)))
            if vals.max(initial=0.0) <= FEAS_TOL * scale:
                accepted = fixed
                break

    if accepted is None:
        feasible, worst, worst_row = linear_feasibility(rows_g, shift_s)
        if not feasible:
            label = labels[nonzero[worst_row - 1]] if worst_row is not None else None
            raise LocalInfeasibleError(
                f"constraint {label} violated by at least {worst:.3e} at the best point"
            )
        raise UnboundedLocalError("local cost is unbounded below on the feasible set")

    x = accepted
    c_rows = _tie_break_multipliers(hess, lin, rows_g, shift_s, x, reference)
    if c_rows is None:
        raise UnboundedLocalError("stationarity system has no nonnegative multiplier")

    multipliers = np.zeros(spec.constraint_count)
    for pos, k in enumerate(nonzero):
        multipliers[labels[k] - 1] = c_rows[pos]

    vals = rows_g @ x + shift_s
    residual = max(
        float(np.abs(hess @ x + lin + rows_g.T @ c_rows).max(initial=0.0)),
        float(np.maximum(vals, 0.0).max(initial=0.0)),
        float(np.abs(c_rows * vals).max(initial=0.0)),
        float(np.maximum(-c_rows, 0.0).max(initial=0.0)),
    )
    return LocalSolution(x, multipliers, spec.cost.value(x), residual)


def fixed_point_residual(
    coupling: np.ndarray, x_nom: np.ndarray, shift: np.ndarray, c: np.ndarray
) -> np.ndarray:
    """Residual of the identity-Hessian multiplier equation.

    With Lambda the diagonal of A'A, a multiplier vector is optimal exactly
    when Lambda c equals the positive part of A'x_nom + shift + (Lambda - A'A)c.
    """
    mat = np.asarray(coupling, dtype=float)
    x_nom = np.asarray(x_nom, dtype=float).ravel()
    shift = np.asarray(shift, dtype=float).ravel()
    c = np.asarray(c, dtype=float).ravel()
    gram = mat.T @ mat
    lam = np.diag(gram).copy()
    if (lam <= 1e-14).any():
        bad = int(np.argmin(lam)) + 1
        raise ValueError(f"constraint {bad} has an all-zero column; its diagonal weight vanishes")
    inner = mat.T @ x_nom + shift + lam * c - gram @ c
    return lam * c - np.maximum(inner, 0.0)


def solve_fixed_point(
    coupling: np.ndarray,
    x_nom: np.ndarray,
    shift: np.ndarray,
    c0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 10000,
) -> LocalSolution:
    """Iterate the multiplier equation for costs of the form 0.5|x - x_nom|^2.

    Converges in one pass when the constraint directions are orthogonal; the
    optimal primal is x_nom - A c and the optimal value 0.5|A c|^2. Raises
    FixedPointError when the iteration cap is hit (callers fall back to
    solve_local).
    """
    mat = np.asarray(coupling, dtype=float)
    x_nom = np.asarray(x_nom, dtype=float).ravel()
    shift = np.asarray(shift, dtype=float).ravel()
    gram = mat.T @ mat
    lam = np.diag(gram).copy()
    if (lam <= 1e-14).any():
        bad = int(np.argmin(lam)) + 1
        raise ValueError(f"constraint {bad} has an all-zero column; its diagonal weight vanishes")
    base = mat.T @ x_nom + shift
    c = np.zeros(lam.shape[0]) if c0 is None else np.asarray(c0, dtype=float).ravel().copy()
    c = np.maximum(c, 0.0)
    for _ in range(max_iter):
        nxt = np.maximum(base + lam * c - gram @ c, 0.0) / lam
        if np.abs(nxt - c).max(initial=0.0) <= tol:
            c = nxt
            break
        c = nxt
    else:
        raise FixedPointError(f"no convergence within {max_iter} iterations")
    x = x_nom - mat @ c
    ac = mat @ c
    vals = mat.T @ x + shift
    residual = max(
        float(np.maximum(vals, 0.0).max(initial=0.0)),
        float(np.abs(c * vals).max(initial=0.0)),
    )
    return LocalSolution(x, c, float(0.5 * ac @ ac), residual)
