"""Shared helpers: an exhaustive QP oracle plus stacking utilities that are
written independently of the library's own stacking code, so oracle
comparisons exercise two genuinely different computation paths."""

import itertools

import numpy as np


def stack_problem(problem):
    """Stack a coupled problem into one dense QP (test-side implementation)."""
    dims = [a.dim for a in problem.agents]
    total = sum(dims)
    m_count = problem.constraint_count
    hess = np.zeros((total, total))
    lin = np.zeros(total)
    const = 0.0
    rows = np.zeros((m_count, total))
    offs = np.zeros(m_count)
    pos = 0
    for a in problem.agents:
        hess[pos : pos + a.dim, pos : pos + a.dim] = a.cost.hessian
        lin[pos : pos + a.dim] = a.cost.linear
        const += a.cost.constant
        rows[:, pos : pos + a.dim] = a.coupling_matrix.T
        offs += a.coupling_offsets
        pos += a.dim
    return hess, lin, const, rows, offs


def enumeration_qp_oracle(hess, lin, const, rows, offs):
    """Brute-force QP minimizer: try every constraint subset as equalities.

    Returns (value, x) of the best KKT-consistent candidate, or None when no
    subset yields a feasible stationary point (infeasible or unbounded).
    """
    d = hess.shape[0]
    m_count = rows.shape[0]
    best = None
    for k in range(m_count + 1):
        for subset in itertools.combinations(range(m_count), k):
            idx = list(subset)
            kkt = np.zeros((d + k, d + k))
            kkt[:d, :d] = hess
            if k:
                kkt[:d, d:] = rows[idx].T
                kkt[d:, :d] = rows[idx]
            rhs = np.concatenate([-lin, -offs[idx]]) if k else -lin
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            if np.abs(kkt @ sol - rhs).max(initial=0.0) > 1e-7:
                continue
            x, mult = sol[:d], sol[d:]
            if (rows @ x + offs).max(initial=-np.inf) > 1e-7:
                continue
            if k and mult.min(initial=0.0) < -1e-7:
                continue
            val = float(0.5 * x @ hess @ x + lin @ x + const)
            if best is None or val < best[0]:
                best = (val, x)
    return best
