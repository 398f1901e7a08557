import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnnmpc.qpsolver import QpProblem, QpStatus, SolverSettings, solve_qp


def active_set_oracle(H, g, C, d, tol=1e-9):
    """Enumerate every working set; return the feasible, dual-feasible
    equality-constrained solution (the global optimum for convex QPs)."""
    n, m = H.shape[0], C.shape[0]
    best = None
    for r in range(m + 1):
        for W in itertools.combinations(range(m), r):
            W = list(W)
            K = np.zeros((n + r, n + r))
            K[:n, :n] = 2 * H
            K[:n, n:] = C[W].T
            K[n:, :n] = C[W]
            rhs = np.concatenate([-g, d[W]])
            try:
                z = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            u, lam = z[:n], z[n:]
            if np.any(C @ u - d > tol) or np.any(lam < -tol):
                continue
            obj = u @ H @ u + g @ u
            if best is None or obj < best[1] - 1e-12:
                best = (u, obj)
    return best


def random_feasible_qp(rng):
    n = int(rng.integers(1, 7))
    m = int(rng.integers(0, 9))
    A = rng.standard_normal((n, n))
    H = A @ A.T + np.eye(n) * (0.1 + rng.random())
    g = rng.standard_normal(n)
    u_feas = rng.standard_normal(n)
    C = rng.standard_normal((m, n))
    d = C @ u_feas + rng.random(m) + 0.05
    return QpProblem(H, g, C, d)


def kkt_certified(p, sol, tol=1e-8):
    scale = 1.0 + np.max(np.abs(p.g))
    ok = sol.stationarity <= tol * scale
    if p.m:
        viol = p.c @ sol.u - p.d
        ok &= float(np.max(viol)) <= tol
        ok &= float(np.max(np.abs(sol.duals * viol))) <= tol
        ok &= bool(np.all(sol.duals >= -tol))
    return ok


def test_unconstrained_scalar():
    sol = solve_qp(QpProblem(np.array([[1.0]]), np.array([-2.0]), np.zeros((0, 1)), np.zeros(0)))
    assert sol.status == QpStatus.OPTIMAL
    assert sol.u[0] == pytest.approx(1.0, abs=1e-12)


def test_single_constraint_hand_kkt():
    sol = solve_qp(QpProblem(np.array([[1.0]]), np.array([-2.0]), np.array([[1.0]]), np.array([0.5])))
    assert sol.status == QpStatus.OPTIMAL
    assert sol.u[0] == pytest.approx(0.5, abs=1e-7)
    assert sol.duals[0] == pytest.approx(1.0, abs=1e-6)


def test_random_qps_match_active_set_enumeration():
    rng = np.random.default_rng(42)
    for trial in range(150):
        p = random_feasible_qp(rng)
        sol = solve_qp(p)
        assert sol.status == QpStatus.OPTIMAL, (trial, sol.status)
        assert kkt_certified(p, sol), trial
        oracle = active_set_oracle(p.h, p.g, p.c, p.d)
        assert np.max(np.abs(sol.u - oracle[0])) <= 1e-6, trial


def test_objective_beats_random_feasible_points():
    rng = np.random.default_rng(7)
    p = random_feasible_qp(rng)
    while p.m == 0:
        p = random_feasible_qp(rng)
    sol = solve_qp(p)
    obj = p.objective(sol.u)
    count = 0
    while count < 1000:
        cand = sol.u + rng.standard_normal(p.n) * 2.0
        if np.all(p.c @ cand <= p.d):
            count += 1
            assert obj <= p.objective(cand) + 1e-8


@given(st.floats(min_value=1e-3, max_value=1e3), st.integers(0, 2**31 - 1))
@settings(max_examples=25)
def test_scale_invariance_of_argmin(alpha, seed):
    rng = np.random.default_rng(seed)
    p = random_feasible_qp(rng)
    sol = solve_qp(p)
    scaled = QpProblem(alpha * p.h, alpha * p.g, p.c, p.d)
    sol2 = solve_qp(scaled)
    assert np.max(np.abs(sol.u - sol2.u)) <= 1e-8 * max(1.0, np.max(np.abs(sol.u)))


def test_determinism():
    rng = np.random.default_rng(3)
    p = random_feasible_qp(rng)
    a = solve_qp(p)
    b = solve_qp(p)
    assert np.array_equal(a.u, b.u)
    assert np.array_equal(a.duals, b.duals)
    assert a.iterations == b.iterations


def test_primal_infeasible_detected():
    # u <= -1 and u >= 2 simultaneously
    p = QpProblem(np.array([[1.0]]), np.zeros(1), np.array([[1.0], [-1.0]]), np.array([-1.0, -2.0]))
    sol = solve_qp(p)
    assert sol.status in (QpStatus.PRIMAL_INFEASIBLE, QpStatus.MAX_ITERATIONS)
    assert sol.primal_infeas > 1e-3  # no pretend-feasible answer


def test_max_iterations_returns_best_iterate():
    rng = np.random.default_rng(11)
    p = random_feasible_qp(rng)
    while p.m == 0:
        p = random_feasible_qp(rng)
    sol = solve_qp(p, SolverSettings(max_iterations=1))
    assert sol.status == QpStatus.MAX_ITERATIONS
    assert np.all(np.isfinite(sol.u))


def test_warm_start_accepted_and_checked():
    p = QpProblem(np.eye(2), np.array([-1.0, -1.0]), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        solve_qp(QpProblem(np.eye(2), np.zeros(2), np.array([[1.0, 0.0]]), np.array([1.0])),
                 SolverSettings(warm_start=np.zeros(3)))
    sol = solve_qp(
        QpProblem(np.eye(2), np.array([-2.0, 0.0]), np.array([[1.0, 0.0]]), np.array([3.0])),
        SolverSettings(warm_start=np.array([0.9, 0.0])),
    )
    assert sol.status == QpStatus.OPTIMAL
    assert sol.u[0] == pytest.approx(1.0, abs=1e-7)


def test_asymmetric_h_rejected():
    with pytest.raises(ValueError):
        QpProblem(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2), np.zeros((0, 2)), np.zeros(0))


def test_mixed_single_and_dense_rows():
    # box rows plus one dense coupling row exercise both Schur paths
    rng = np.random.default_rng(13)
    H = np.eye(3)
    g = np.array([-4.0, -4.0, -4.0])
    C = np.vstack([np.eye(3), -np.eye(3), np.array([[1.0, 1.0, 1.0]])])
    d = np.concatenate([np.full(3, 1.5), np.zeros(3), [2.0]])
    p = QpProblem(H, g, C, d)
    sol = solve_qp(p)
    oracle = active_set_oracle(H, g, C, d)
    assert np.max(np.abs(sol.u - oracle[0])) <= 1e-6
