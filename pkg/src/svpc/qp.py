"""Dense primal active-set solver for convex quadratic programs.

    minimize    1/2 x^T H x + g^T x
    subject to  A x  = b
                G x <= h

Equality constraints are eliminated once per problem through a
null-space basis Z (QR-based, or from a caller-supplied basic column
set when the equalities carry one); H must be positive definite on
that null space (the caller adds Levenberg-style damping when
assembling Gauss-Newton data).  Each active-set iteration solves the
working-set EQP through a
Schur complement on the reduced Hessian inverse, so adding or dropping
a row costs one small dual solve instead of a full KKT factorization.
Tie breaking is by smallest row index and there is no randomness:
repeated solves of identical data give bit-identical results.

The caller must supply a feasible starting point.  That is cheap for
the multiple-shooting problems this solver exists for: a forward sweep
of the linearized dynamics satisfies the equalities and enlarging the
slack variables covers every soft inequality.  An optional warm working
set (from the previous solve) is filtered down to the rows active at
the start point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class QpSolution:
    x: np.ndarray
    status: str  # optimal | iteration_limit | infeasible_start
    iterations: int
    active_set: list[int] = field(default_factory=list)
    lam_ineq: np.ndarray | None = None


def _null_basis(A: np.ndarray, basic_cols: np.ndarray | None) -> np.ndarray:
    """Basis of the null space of A (full row rank).

    With ``basic_cols`` -- caller-supplied column indices forming an
    invertible square block, as multiple-shooting equalities always
    have in their state columns -- the basis comes from one linear
    solve.  Otherwise a complete QR of A^T provides an orthonormal one.
    """
    m, n = A.shape
    if basic_cols is not None:
        basic = np.asarray(basic_cols, dtype=int)
        mask = np.ones(n, dtype=bool)
        mask[basic] = False
        nonbasic = np.nonzero(mask)[0]
        try:
            Xb = np.linalg.solve(A[:, basic], A[:, nonbasic])
        except np.linalg.LinAlgError:
            pass
        else:
            Z = np.zeros((n, n - m))
            Z[nonbasic, np.arange(n - m)] = 1.0
            Z[basic] = -Xb
            return Z
    q_full, _ = np.linalg.qr(A.T, mode="complete")
    return q_full[:, m:]


def solve_qp(
    H: np.ndarray,
    g: np.ndarray,
    A: np.ndarray | None,
    b: np.ndarray | None,
    G: np.ndarray | None,
    h: np.ndarray | None,
    x0: np.ndarray,
    working0: list[int] | None = None,
    max_iter: int = 500,
    feas_tol: float = 1e-7,
    opt_tol: float = 1e-9,
    basic_cols: np.ndarray | None = None,
    null_basis: np.ndarray | None = None,
) -> QpSolution:
    """Solve the QP from the feasible point x0.

    ``null_basis`` lets the caller hand over a precomputed basis of the
    null space of A (any full-rank basis works); otherwise one is built
    here from ``basic_cols`` or by QR.
    """
    n = len(g)
    x = np.asarray(x0, dtype=float).copy()
    m_eq = 0 if A is None else A.shape[0]
    m_in = 0 if G is None else G.shape[0]

    if m_eq:
        if np.max(np.abs(A @ x - b)) > feas_tol:
            return QpSolution(x, "infeasible_start", 0)
        Z = null_basis if null_basis is not None else _null_basis(A, basic_cols)
    else:
        Z = np.eye(n)

    resid = h - G @ x if m_in else np.zeros(0)
    if m_in and np.min(resid) < -feas_tol:
        return QpSolution(x, "infeasible_start", 0)

    nz = Z.shape[1]
    HZ = H @ Z
    Hz = Z.T @ HZ
    Hz = 0.5 * (Hz + Hz.T)
    Hz_inv = np.linalg.inv(Hz)

    # working set state: row indices, gz rows (G_i Z), T = Hz^-1 gz^T
    # columns, S = Gw T; gz rows are formed on demand since only a few
    # of the many inequality rows ever join the working set
    work: list[int] = []
    gz_rows: list[np.ndarray] = []
    T = np.zeros((nz, 0))
    S = np.zeros((0, 0))
    in_work = np.zeros(m_in, dtype=bool)

    def add_row(i: int) -> None:
        nonlocal T, S
        gz = G[i] @ Z
        t = Hz_inv @ gz
        s_col = (
            np.array([r @ t for r in gz_rows]) if gz_rows else np.zeros(0)
        )
        k = len(work)
        S_new = np.empty((k + 1, k + 1))
        S_new[:k, :k] = S
        S_new[:k, k] = s_col
        S_new[k, :k] = s_col
        S_new[k, k] = gz @ t
        S = S_new
        T = np.column_stack([T, t])
        work.append(i)
        gz_rows.append(gz)
        in_work[i] = True

    def drop_row(pos: int) -> None:
        nonlocal T, S
        in_work[work[pos]] = False
        del work[pos]
        del gz_rows[pos]
        T = np.delete(T, pos, axis=1)
        S = np.delete(np.delete(S, pos, axis=0), pos, axis=1)

    if working0:
        for i in sorted(set(working0)):
            # only rows (near-)active at x0 may enter the working set;
            # a slightly slack row is held at its current value, which
            # is conservative and gets dropped if its multiplier says so
            if 0 <= i < m_in and resid[i] <= 1e-5 and len(work) < nz:
                add_row(i)

    scale = 1.0 + float(np.max(np.abs(g))) if n else 1.0
    lam_full = np.zeros(m_in)
    Hx = H @ x

    for it in range(1, max_iter + 1):
        grad_z = Z.T @ (Hx + g)
        p0 = -(Hz_inv @ grad_z)
        k = len(work)
        if k:
            Aw = np.stack(gz_rows)
            rhs = Aw @ p0
            # tiny ridge keeps nearly dependent working rows solvable
            lam_w = np.linalg.solve(S + 1e-12 * np.eye(k), rhs)
            y = p0 - T @ lam_w
        else:
            lam_w = np.zeros(0)
            y = p0

        p = Z @ y
        if np.max(np.abs(p), initial=0.0) <= opt_tol * scale:
            if k == 0 or np.min(lam_w) >= -opt_tol * scale:
                lam_full[:] = 0.0
                if k:
                    lam_full[work] = lam_w
                return QpSolution(x, "optimal", it, sorted(work), lam_full)
            drop_row(int(np.argmin(lam_w)))
            continue

        alpha, blocker = 1.0, -1
        if m_in:
            Gp = G @ p
            open_rows = ~in_work & (Gp > 1e-12)
            if np.any(open_rows):
                ratios = np.where(
                    open_rows, np.maximum(resid, 0.0) / np.where(open_rows, Gp, 1.0),
                    np.inf,
                )
                j = int(np.argmin(ratios))
                if ratios[j] < alpha - 1e-14:
                    alpha, blocker = float(ratios[j]), j
            resid -= alpha * Gp
        x += alpha * p
        Hx += alpha * (HZ @ y)
        if blocker >= 0:
            if len(work) >= nz:
                # degenerate geometry; restart the working set
                while work:
                    drop_row(0)
            add_row(blocker)
            resid[blocker] = 0.0

    lam_full[:] = 0.0
    if work and len(lam_w) == len(work):
        lam_full[work] = lam_w
    return QpSolution(x, "iteration_limit", max_iter, sorted(work), lam_full)
