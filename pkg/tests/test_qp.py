import itertools

import numpy as np
import pytest

from svpc.qp import solve_qp


def brute_force_qp(H, g, A, b, G, h):
    """Oracle: enumerate every active subset of the inequalities, solve
    the resulting equality-constrained QP by KKT, keep the best
    feasible candidate.  Exponential, so only for tiny problems."""
    n = len(g)
    m_in = G.shape[0]
    best, best_val = None, np.inf
    for k in range(m_in + 1):
        for subset in itertools.combinations(range(m_in), k):
            C = np.vstack([A, G[list(subset)]]) if A is not None else G[list(subset)]
            d = (
                np.concatenate([b, h[list(subset)]])
                if A is not None
                else h[list(subset)]
            )
            mc = C.shape[0] if C.size else 0
            kkt = np.zeros((n + mc, n + mc))
            kkt[:n, :n] = H
            if mc:
                kkt[:n, n:] = C.T
                kkt[n:, :n] = C
            rhs = np.concatenate([-g, d]) if mc else -g
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            if np.max(G @ x - h, initial=-1) > 1e-8:
                continue
            if A is not None and np.max(np.abs(A @ x - b)) > 1e-8:
                continue
            val = 0.5 * x @ H @ x + g @ x
            if val < best_val - 1e-12:
                best_val, best = val, x
    return best


def random_problem(rng, n=6, m_eq=2, m_in=5):
    M = rng.standard_normal((n, n))
    H = M @ M.T + n * np.eye(n)
    g = rng.standard_normal(n)
    A = rng.standard_normal((m_eq, n)) if m_eq else None
    G = rng.standard_normal((m_in, n))
    # build a point that is strictly feasible, then derive b, h from it
    x_feas = rng.standard_normal(n)
    b = A @ x_feas if m_eq else None
    h = G @ x_feas + rng.uniform(0.1, 2.0, m_in)
    return H, g, A, b, G, h, x_feas


def test_unconstrained_minimum_inside():
    H = np.diag([2.0, 4.0])
    g = np.array([-2.0, -4.0])  # minimum at (1, 1)
    G = np.array([[1.0, 0.0], [0.0, 1.0]])
    h = np.array([5.0, 5.0])
    sol = solve_qp(H, g, None, None, G, h, np.zeros(2))
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.x, [1, 1], atol=1e-9)
    assert sol.active_set == []


def test_active_bound():
    H = np.eye(2)
    g = np.array([-10.0, 0.0])
    G = np.array([[1.0, 0.0]])
    h = np.array([3.0])
    sol = solve_qp(H, g, None, None, G, h, np.zeros(2))
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.x, [3, 0], atol=1e-9)
    assert sol.active_set == [0]
    assert sol.lam_ineq[0] > 0


def test_equality_only_matches_kkt():
    rng = np.random.default_rng(0)
    for _ in range(20):
        H, g, A, b, G, h, x0 = random_problem(rng, n=7, m_eq=3, m_in=0)
        sol = solve_qp(H, g, A, b, np.zeros((0, 7)), np.zeros(0), x0)
        n, m = 7, 3
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = H
        kkt[:n, n:] = A.T
        kkt[n:, :n] = A
        ref = np.linalg.solve(kkt, np.concatenate([-g, b]))[:n]
        np.testing.assert_allclose(sol.x, ref, atol=1e-8)


def test_matches_brute_force_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(40):
        H, g, A, b, G, h, x0 = random_problem(rng, n=5, m_eq=2, m_in=5)
        sol = solve_qp(H, g, A, b, G, h, x0)
        assert sol.status == "optimal"
        ref = brute_force_qp(H, g, A, b, G, h)
        assert ref is not None
        val = 0.5 * sol.x @ H @ sol.x + g @ sol.x
        ref_val = 0.5 * ref @ H @ ref + g @ ref
        assert val == pytest.approx(ref_val, abs=1e-7)
        np.testing.assert_allclose(sol.x, ref, atol=1e-6)


def test_solution_feasible_and_kkt_satisfied():
    rng = np.random.default_rng(11)
    for _ in range(30):
        H, g, A, b, G, h, x0 = random_problem(rng, n=9, m_eq=3, m_in=12)
        sol = solve_qp(H, g, A, b, G, h, x0)
        assert sol.status == "optimal"
        assert np.max(np.abs(A @ sol.x - b)) < 1e-8
        assert np.max(G @ sol.x - h) < 1e-8
        # stationarity: gradient balanced by the constraint normals
        grad = H @ sol.x + g + G.T @ sol.lam_ineq
        nu, *_ = np.linalg.lstsq(A.T, -grad, rcond=None)
        assert np.max(np.abs(grad + A.T @ nu)) < 1e-6
        assert np.min(sol.lam_ineq) > -1e-8


def test_infeasible_start_detected():
    H = np.eye(2)
    g = np.zeros(2)
    G = np.array([[1.0, 0.0]])
    h = np.array([-1.0])
    sol = solve_qp(H, g, None, None, G, h, np.zeros(2))
    assert sol.status == "infeasible_start"


def test_deterministic_bitwise():
    rng = np.random.default_rng(3)
    H, g, A, b, G, h, x0 = random_problem(rng, n=8, m_eq=2, m_in=10)
    s1 = solve_qp(H, g, A, b, G, h, x0)
    s2 = solve_qp(H, g, A, b, G, h, x0)
    assert np.array_equal(s1.x, s2.x)
    assert s1.active_set == s2.active_set
    assert s1.iterations == s2.iterations
