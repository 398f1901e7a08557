import numpy as np
import pytest

from gnnmpc.condensing import (
    ConfigurationError,
    CondensedQp,
    LocalCondensed,
    OcpSpec,
    StateConstraint,
    assemble_qp,
    condense_gammas,
    condense_local,
    condense_ocp,
    cost_to_standard_form,
    dense_condense_oracle,
    expand_soft_constraints,
    full_dynamics_matrices,
    local_hessian_gradient,
    read_matrix_text,
    reconstruct_states,
    stage_input_box,
    write_matrix_text,
)
from gnnmpc.gnn import LinearizedDynamics
from gnnmpc.graph import GraphTopology, chain_topology


def scalar_lin(a, b, c, n_stages, x0):
    topo = GraphTopology(1, ((),), 1)
    lin = LinearizedDynamics(
        topo, n_stages,
        a_self=np.full((n_stages, 1, 1, 1), float(a)),
        a_nbr=np.zeros((n_stages, 0, 1, 1)),
        b=np.full((n_stages, 1, 1, 1), float(b)),
        c=np.full((n_stages, 1, 1), float(c)),
    )
    return lin, np.array([[float(x0)]])


def random_instance(rng, max_m=8, max_nx=4, max_nu=3, max_n=10, with_constraints=True):
    M = int(rng.integers(1, max_m + 1))
    nx = int(rng.integers(1, max_nx + 1))
    nu = int(rng.integers(1, max_nu + 1))
    N = int(rng.integers(1, max_n + 1))
    nbrs = []
    for i in range(M):
        others = [j for j in range(M) if j != i]
        k = int(rng.integers(0, min(2, len(others)) + 1))
        pick = sorted(rng.choice(others, size=k, replace=False).tolist()) if k else []
        nbrs.append(tuple(int(v) for v in pick))
    topo = GraphTopology(M, tuple(nbrs), 2)
    E = len(topo.edges)
    scale = 0.9 / max(1, nx)
    lin = LinearizedDynamics(
        topo, N,
        a_self=rng.standard_normal((N, M, nx, nx)) * scale,
        a_nbr=rng.standard_normal((N, E, nx, nx)) * scale,
        b=rng.standard_normal((N, M, nx, nu)),
        c=rng.standard_normal((N, M, nx)),
    )
    q = rng.standard_normal((M, N + 1, nx, nx))
    q = np.einsum("mkab,mkcb->mkac", q, q) * 0.3
    r = rng.standard_normal((N, nu, nu))
    r = np.einsum("kab,kcb->kac", r, r) + np.eye(nu) * 0.5
    icons = None
    scons = []
    if with_constraints:
        icons = [(rng.standard_normal((2, nu)), rng.standard_normal(2)) for _ in range(N)]
        for _ in range(int(rng.integers(0, 5))):
            scons.append(
                StateConstraint(
                    int(rng.integers(0, M)), int(rng.integers(0, N + 1)),
                    rng.standard_normal((1, nx)), rng.standard_normal(1),
                )
            )
    spec = OcpSpec(
        topo, N, q, rng.standard_normal((M, N + 1, nx)), r, rng.standard_normal((N, nu)),
        icons, scons,
    )
    return spec, lin, rng.standard_normal((M, nx))


def test_gamma_hand_example():
    # x_{k+1} = 2 x_k + u_k from x0 = 1 over two stages
    lin, x0 = scalar_lin(2.0, 1.0, 0.0, 2, 1.0)
    gu, gx = condense_gammas(lin, x0)
    assert np.allclose(gu[0].reshape(3, 2), [[0, 0], [1, 0], [2, 1]])
    assert np.allclose(gx[0].reshape(3), [1, 2, 4])


def test_gamma_memoryless_system():
    topo = chain_topology(2)
    N, nx, nu = 3, 2, 2
    lin = LinearizedDynamics(
        topo, N,
        a_self=np.zeros((N, 2, nx, nx)),
        a_nbr=np.zeros((N, 2, nx, nx)),
        b=np.tile(np.eye(2), (N, 2, 1, 1)),
        c=np.zeros((N, 2, nx)),
    )
    x0 = np.array([[1.0, 2.0], [3.0, 4.0]])
    gu, gx = condense_gammas(lin, x0)
    assert np.allclose(gx[:, 0], x0)
    assert np.allclose(gx[:, 1:], 0)
    for i in range(2):
        for k in range(1, N + 1):
            for j in range(N):
                blk = gu[i, k, :, j * nu : (j + 1) * nu]
                assert np.allclose(blk, np.eye(2) if j == k - 1 else 0)


def test_gamma_top_block_invariants():
    rng = np.random.default_rng(0)
    spec, lin, x0 = random_instance(rng)
    gu, gx = condense_gammas(lin, x0)
    assert np.allclose(gu[:, 0], 0)
    assert np.allclose(gx[:, 0], x0)


def test_gamma_reconstruction_matches_rollout():
    rng = np.random.default_rng(1)
    for _ in range(10):
        spec, lin, x0 = random_instance(rng)
        gu, gx = condense_gammas(lin, x0)
        A, B, c = full_dynamics_matrices(lin)
        M, nx = x0.shape
        N, nu = lin.horizon, lin.n_u
        for _ in range(5):
            u = rng.standard_normal(N * nu)
            xs = [x0.reshape(-1)]
            for k in range(N):
                xs.append(A[k] @ xs[-1] + B[k] @ u[k * nu : (k + 1) * nu] + c[k])
            truth = np.stack(xs).reshape(N + 1, M, nx).transpose(1, 0, 2)
            rec = reconstruct_states(gu, gx, u)
            assert np.max(np.abs(rec - truth)) <= 1e-12


def test_reconstruct_zero_input_gives_gamma_x():
    rng = np.random.default_rng(2)
    spec, lin, x0 = random_instance(rng)
    gu, gx = condense_gammas(lin, x0)
    rec = reconstruct_states(gu, gx, np.zeros(lin.horizon * lin.n_u))
    assert np.array_equal(rec, gx)
    assert np.allclose(rec[:, 0], x0)


def test_cost_standard_form_values():
    topo = GraphTopology(1, ((),), 1)
    q = np.full((1, 2, 1, 1), 2.0)
    x_ref = np.full((1, 2, 1), 3.0)
    r = np.full((1, 1, 1), 1.0)
    u_ref = np.zeros((1, 1))
    spec = OcpSpec(topo, 1, q, x_ref, r, u_ref)
    cost = cost_to_standard_form(spec)
    assert cost.q_lin[0, 0, 0] == pytest.approx(-12.0)  # -2 * Q * x_ref

    spec0 = OcpSpec(topo, 1, q, np.zeros((1, 2, 1)), r, u_ref)
    cost0 = cost_to_standard_form(spec0)
    assert np.all(cost0.q_lin == 0) and np.all(cost0.r_lin == 0)


def test_tracking_argmin_matches_grid_search():
    # two-stage scalar tracking problem minimized by brute-force refinement
    lin, x0 = scalar_lin(0.8, 0.5, 0.1, 2, 1.0)
    topo = lin.topology
    q = np.full((1, 3, 1, 1), 1.5)
    x_ref = np.array([[[0.6], [0.4], [0.2]]])
    r = np.full((2, 1, 1), 0.3)
    u_ref = np.array([[0.1], [-0.2]])
    spec = OcpSpec(topo, 2, q, x_ref, r, u_ref)

    def tracking_cost(u):
        xs = [1.0]
        for k in range(2):
            xs.append(0.8 * xs[-1] + 0.5 * u[k] + 0.1)
        c = sum(1.5 * (x - xr) ** 2 for x, xr in zip(xs, x_ref[0, :, 0]))
        c += sum(0.3 * (u[k] - u_ref[k, 0]) ** 2 for k in range(2))
        return c

    lo, hi = np.full(2, -5.0), np.full(2, 5.0)
    for _ in range(12):  # nested grid refinement to ~1e-7 resolution
        g0 = np.linspace(lo[0], hi[0], 21)
        g1 = np.linspace(lo[1], hi[1], 21)
        vals = [[tracking_cost([a, b]) for b in g1] for a in g0]
        i, j = np.unravel_index(np.argmin(vals), (21, 21))
        span0, span1 = (hi[0] - lo[0]) / 10, (hi[1] - lo[1]) / 10
        lo = np.array([g0[i] - span0 / 2, g1[j] - span1 / 2])
        hi = np.array([g0[i] + span0 / 2, g1[j] + span1 / 2])
    u_grid = (lo + hi) / 2

    qp = condense_ocp(spec, lin, x0)
    u_qp = np.linalg.solve(2 * qp.h, -qp.g)
    assert np.max(np.abs(u_qp - u_grid)) <= 1e-6


def test_local_hessian_gradient_cases():
    # cost-free node
    rng = np.random.default_rng(3)
    gu = rng.standard_normal((3, 2, 4))
    gx = rng.standard_normal((3, 2))
    qb = np.zeros((3, 2, 2))
    ql = rng.standard_normal((3, 2))
    h, g = local_hessian_gradient(gu, gx, qb, ql)
    assert np.allclose(h, 0)
    assert np.allclose(g, np.einsum("kab,ka->b", gu, ql))

    # scalar N=1: A=1, B=1, Q=1, x0=1 -> H=1, g=2
    lin, x0 = scalar_lin(1.0, 1.0, 0.0, 1, 1.0)
    gu, gx = condense_gammas(lin, x0)
    h, g = local_hessian_gradient(gu[0], gx[0], np.ones((2, 1, 1)), np.zeros((2, 1)))
    assert h[0, 0] == pytest.approx(1.0)
    assert g[0] == pytest.approx(2.0)
    # cross-check with calculus: minimizing (x0+u)^2 + R u^2 with R=0.5
    # gives d/du [u^2 + 2u + 0.5 u^2] = 0 -> u = -2/3
    u_star = -g[0] / (2 * (h[0, 0] + 0.5))
    assert u_star == pytest.approx(-2.0 / 3.0)


def test_local_hessian_symmetry():
    rng = np.random.default_rng(4)
    for _ in range(20):
        spec, lin, x0 = random_instance(rng, max_m=4)
        locs = condense_local(spec, lin, x0)
        for lc in locs:
            assert np.max(np.abs(lc.h - lc.h.T)) <= 1e-14


def test_assemble_input_only_constraints():
    lin, x0 = scalar_lin(1.0, 1.0, 0.0, 2, 0.5)
    topo = lin.topology
    cu = [(np.array([[1.0], [-1.0]]), np.array([2.0, 0.0]))] * 2
    spec = OcpSpec(topo, 2, np.zeros((1, 3, 1, 1)), np.zeros((1, 3, 1)),
                   np.tile(np.eye(1), (2, 1, 1)), np.zeros((2, 1)), cu, [])
    qp = assemble_qp(spec, condense_local(spec, lin, x0))
    expect_c = np.zeros((4, 2))
    expect_c[0, 0] = 1.0
    expect_c[1, 0] = -1.0
    expect_c[2, 1] = 1.0
    expect_c[3, 1] = -1.0
    assert np.array_equal(qp.c, expect_c)
    assert np.array_equal(qp.d, [2.0, 0.0, 2.0, 0.0])


def test_assemble_two_identical_nodes():
    topo = GraphTopology(2, ((), ()), 1)  # decoupled pair
    N, nx, nu = 2, 1, 1
    lin = LinearizedDynamics(
        topo, N,
        a_self=np.full((N, 2, 1, 1), 0.7),
        a_nbr=np.zeros((N, 0, 1, 1)),
        b=np.full((N, 2, 1, 1), 1.0),
        c=np.zeros((N, 2, 1)),
    )
    q = np.full((2, N + 1, 1, 1), 1.3)
    spec = OcpSpec(topo, N, q, np.zeros((2, N + 1, 1)),
                   np.tile(np.eye(1) * 0.2, (N, 1, 1)), np.zeros((N, 1)))
    x0 = np.array([[0.5], [0.5]])
    locs = condense_local(spec, lin, x0)
    qp = assemble_qp(spec, locs)
    r_bar = np.eye(2) * 0.2
    assert np.allclose(qp.h, 2 * locs[0].h + r_bar)


def test_sparse_matches_dense_oracle():
    rng = np.random.default_rng(5)
    for _ in range(40):
        spec, lin, x0 = random_instance(rng)
        qp_fused = condense_ocp(spec, lin, x0)
        qp_local = assemble_qp(spec, condense_local(spec, lin, x0))
        qp_dense = dense_condense_oracle(spec, lin, x0)
        for a, b in ((qp_fused, qp_dense), (qp_local, qp_dense)):
            assert np.max(np.abs(a.h - b.h)) <= 1e-10
            assert np.max(np.abs(a.g - b.g)) <= 1e-10
            assert a.c.shape == b.c.shape
            if a.c.size:
                assert np.max(np.abs(a.c - b.c)) <= 1e-10
                assert np.max(np.abs(a.d - b.d)) <= 1e-10
            assert np.array_equal(a.soft, b.soft)


def test_dense_oracle_zero_dynamics():
    topo = GraphTopology(1, ((),), 1)
    N = 2
    lin = LinearizedDynamics(topo, N, np.zeros((N, 1, 1, 1)), np.zeros((N, 0, 1, 1)),
                             np.zeros((N, 1, 1, 1)), np.zeros((N, 1, 1)))
    r = np.tile(np.eye(1) * 2.0, (N, 1, 1))
    spec = OcpSpec(topo, N, np.ones((1, N + 1, 1, 1)), np.zeros((1, N + 1, 1)),
                   r, np.full((N, 1), 0.5))
    qp = dense_condense_oracle(spec, lin, np.array([[1.0]]))
    assert np.allclose(qp.h, np.eye(2) * 2.0)
    assert np.allclose(qp.g, -2.0 * 2.0 * 0.5)  # r_lin = -2 R u_ref


def test_dense_oracle_size_guard():
    M, N = 40, 20  # 40*6*21 = 5040 stacked rows > limit
    topo = chain_topology(M)
    E = len(topo.edges)
    lin = LinearizedDynamics(topo, N, np.zeros((N, M, 6, 6)), np.zeros((N, E, 6, 6)),
                             np.zeros((N, M, 6, 1)), np.zeros((N, M, 6)))
    spec = OcpSpec(topo, N, np.zeros((M, N + 1, 6, 6)), np.zeros((M, N + 1, 6)),
                   np.tile(np.eye(1), (N, 1, 1)), np.zeros((N, 1)))
    with pytest.raises(ValueError, match="dense oracle"):
        dense_condense_oracle(spec, lin, np.zeros((M, 6)))


def test_condensed_hessian_positive_definite():
    rng = np.random.default_rng(6)
    for _ in range(15):
        spec, lin, x0 = random_instance(rng, with_constraints=False)
        qp = condense_ocp(spec, lin, x0)
        lam_h = np.linalg.eigvalsh(qp.h)[0]
        lam_r = min(np.linalg.eigvalsh(0.5 * (rk + rk.T))[0] for rk in spec.r)
        assert lam_h >= lam_r - 1e-12


def test_unconstrained_argmin_matches_full_kkt():
    rng = np.random.default_rng(7)
    for _ in range(15):
        spec, lin, x0 = random_instance(rng, with_constraints=False)
        qp = condense_ocp(spec, lin, x0)
        u_cond = np.linalg.solve(2 * qp.h, -qp.g)
        u_kkt = full_horizon_kkt_solution(spec, lin, x0)
        rel = np.max(np.abs(u_cond - u_kkt)) / max(1.0, np.max(np.abs(u_kkt)))
        assert rel <= 1e-8


def full_horizon_kkt_solution(spec, lin, x0):
    """Equality-constrained solve over the stacked states and inputs."""
    A, B, c = full_dynamics_matrices(lin)
    M, nx = x0.shape
    N, nu = lin.horizon, lin.n_u
    n_x = M * nx
    nz = (N + 1) * n_x + N * nu
    cost = cost_to_standard_form(spec)
    Hf = np.zeros((nz, nz))
    gf = np.zeros(nz)
    for k in range(N + 1):
        for i in range(M):
            r0 = k * n_x + i * nx
            Hf[r0 : r0 + nx, r0 : r0 + nx] = cost.q_blocks[i, k]
            gf[r0 : r0 + nx] = cost.q_lin[i, k]
    for k in range(N):
        r0 = (N + 1) * n_x + k * nu
        Hf[r0 : r0 + nu, r0 : r0 + nu] = cost.r_blocks[k]
        gf[r0 : r0 + nu] = cost.r_lin[k]
    ne = (N + 1) * n_x
    Ec = np.zeros((ne, nz))
    e = np.zeros(ne)
    Ec[:n_x, :n_x] = np.eye(n_x)
    e[:n_x] = x0.reshape(-1)
    for k in range(N):
        r0 = (k + 1) * n_x
        Ec[r0 : r0 + n_x, r0 : r0 + n_x] = np.eye(n_x)
        Ec[r0 : r0 + n_x, k * n_x : (k + 1) * n_x] = -A[k]
        Ec[r0 : r0 + n_x, (N + 1) * n_x + k * nu : (N + 1) * n_x + (k + 1) * nu] = -B[k]
        e[r0 : r0 + n_x] = c[k]
    K = np.block([[2 * Hf, Ec.T], [Ec, np.zeros((ne, ne))]])
    z = np.linalg.solve(K, np.concatenate([-gf, e]))
    return z[(N + 1) * n_x : nz]


def test_threaded_condensing_bitwise_equal():
    rng = np.random.default_rng(8)
    spec, lin, x0 = random_instance(rng, max_m=8, max_n=8)
    q1 = condense_ocp(spec, lin, x0, threads=1)
    q2 = condense_ocp(spec, lin, x0, threads=2)
    assert np.array_equal(q1.h, q2.h)
    assert np.array_equal(q1.g, q2.g)
    assert np.array_equal(q1.c, q2.c)


def test_soft_constraint_expansion():
    # infeasible hard row becomes satisfiable through a penalized slack
    lin, x0 = scalar_lin(1.0, 1.0, 0.0, 1, 0.0)
    topo = lin.topology
    spec = OcpSpec(
        topo, 1, np.zeros((1, 2, 1, 1)), np.zeros((1, 2, 1)),
        np.tile(np.eye(1), (1, 1, 1)), np.zeros((1, 1)),
        [(np.array([[1.0], [-1.0]]), np.array([0.5, 0.5]))],  # |u| <= 0.5
        [StateConstraint(0, 1, np.array([[-1.0]]), np.array([-2.0]), soft=True, rho1=10.0, rho2=100.0)],
    )
    qp = condense_ocp(spec, lin, x0)
    h, g, c, d, n_orig = expand_soft_constraints(qp)
    assert n_orig == 1 and h.shape == (2, 2)
    from gnnmpc.qpsolver import QpProblem, solve_qp

    sol = solve_qp(QpProblem(h, g, c, d))
    assert sol.status.name == "OPTIMAL"
    # x1 = u <= 0.5 < 2, so the slack must absorb the gap
    assert sol.u[0] == pytest.approx(0.5, abs=1e-6)
    assert sol.u[1] >= 1.4

    # hard version is infeasible -> reported as such
    spec.state_constraints[0].soft = False
    qp_hard = condense_ocp(spec, lin, x0)
    sol_hard = solve_qp(QpProblem(qp_hard.h, qp_hard.g, qp_hard.c, qp_hard.d))
    assert sol_hard.status.name in ("PRIMAL_INFEASIBLE", "MAX_ITERATIONS", "NUMERICAL_FAILURE")


def test_cost_validation():
    topo = GraphTopology(1, ((),), 1)
    q_bad = -np.ones((1, 2, 1, 1))
    spec = OcpSpec(topo, 1, q_bad, np.zeros((1, 2, 1)), np.tile(np.eye(1), (1, 1, 1)), np.zeros((1, 1)))
    with pytest.raises(ConfigurationError):
        spec.validate_costs()
    q_ok = np.ones((1, 2, 1, 1))
    r_bad = np.zeros((1, 1, 1))
    spec2 = OcpSpec(topo, 1, q_ok, np.zeros((1, 2, 1)), r_bad, np.zeros((1, 1)))
    with pytest.raises(ConfigurationError):
        spec2.validate_costs()


def test_matrix_text_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    a = rng.standard_normal((4, 7))
    write_matrix_text(tmp_path / "a.txt", a)
    first = (tmp_path / "a.txt").read_text().splitlines()[0]
    assert first == "4 7"
    assert np.array_equal(read_matrix_text(tmp_path / "a.txt"), a)


def test_stage_input_box():
    C, d = stage_input_box(2, 0.0, np.array([3.0, 4.0]))
    u = np.array([1.0, 5.0])
    assert np.array_equal(C @ u <= d, [True, False, True, True])
