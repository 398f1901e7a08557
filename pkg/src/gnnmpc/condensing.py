"""State elimination for block-sparse linear time-varying optimal control.

Two routes to the same condensed QP ``min_u u'Hu + g'u s.t. Cu <= d``:

* the per-node route: each node carries its own prediction maps
  (Gamma_u^i, Gamma_x^i) built by a neighborhood-local recursion, its own
  Hessian/gradient contribution and its own constraint rows. Cost grows
  linearly in the node count for a bounded neighborhood size.
* the classical dense route over the full stacked state, used as the
  numerical oracle for the per-node route and guarded to small problems.

Column-block k of Gamma_u corresponds to input u_k; row-block k to state
x_k, with per-node Gammas covering stages 0..N (stage 0 rows are the
initial condition and do not depend on u).

Conventions pinned here and relied on by tests:
* the QP objective is u'Hu + g'u (no 1/2), so g carries a factor-2 term
  2*Gamma_u' Qbar Gamma_x from expanding the quadratic cost;
* stacked constraint rows are input rows first (stage-major), then state
  rows grouped by node in ascending order, stages ascending within a node.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .gnn import LinearizedDynamics
from .graph import GraphTopology

DENSE_ORACLE_ROW_LIMIT = 5000


class ConfigurationError(ValueError):
    pass


def min_eig_sym(A: np.ndarray) -> float:
    """Smallest eigenvalue of the symmetric part."""
    return float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])


@dataclass
class StateConstraint:
    """Half-space rows C x_i[k] <= d on one node at one stage."""

    node: int
    stage: int
    c: np.ndarray  # (rows, n_state)
    d: np.ndarray  # (rows,)
    soft: bool = False
    rho1: float = 1e3
    rho2: float = 1e4

    def __post_init__(self):
        self.c = np.atleast_2d(np.asarray(self.c, dtype=float))
        self.d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if self.c.shape[0] != self.d.shape[0]:
            raise ConfigurationError("constraint row count does not match bound length")
        if self.soft and self.rho2 <= 0:
            raise ConfigurationError("soft constraints need rho2 > 0")


@dataclass
class OcpSpec:
    """Tracking OCP data: per-node quadratic stage costs, references and
    half-space constraints over a finite horizon."""

    topology: GraphTopology
    horizon: int
    q: np.ndarray  # (M, N+1, n_state, n_state), PSD
    x_ref: np.ndarray  # (M, N+1, n_state)
    r: np.ndarray  # (N, n_u, n_u), PD
    u_ref: np.ndarray  # (N, n_u)
    input_constraints: list[tuple[np.ndarray, np.ndarray]] | None = None  # per stage
    state_constraints: list[StateConstraint] = field(default_factory=list)

    def __post_init__(self):
        M = self.topology.node_count
        N = self.horizon
        self.q = np.asarray(self.q, dtype=float)
        self.x_ref = np.asarray(self.x_ref, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.u_ref = np.asarray(self.u_ref, dtype=float)
        nx = self.q.shape[-1]
        if self.q.shape != (M, N + 1, nx, nx):
            raise ConfigurationError("q must be (M, N+1, n_state, n_state)")
        if self.x_ref.shape != (M, N + 1, nx):
            raise ConfigurationError("x_ref must be (M, N+1, n_state)")
        nu = self.r.shape[-1]
        if self.r.shape != (N, nu, nu):
            raise ConfigurationError("r must be (N, n_u, n_u)")
        if self.u_ref.shape != (N, nu):
            raise ConfigurationError("u_ref must be (N, n_u)")
        if self.input_constraints is not None:
            if len(self.input_constraints) != N:
                raise ConfigurationError("need one input constraint pair per stage")
            norm = []
            for C, d in self.input_constraints:
                C = np.atleast_2d(np.asarray(C, dtype=float))
                d = np.atleast_1d(np.asarray(d, dtype=float))
                if C.shape != (d.shape[0], nu):
                    raise ConfigurationError("input constraint shape mismatch")
                norm.append((C, d))
            self.input_constraints = norm
        for sc in self.state_constraints:
            if not 0 <= sc.node < M or not 0 <= sc.stage <= N:
                raise ConfigurationError("state constraint node/stage out of range")
            if sc.c.shape[1] != nx:
                raise ConfigurationError("state constraint column count != n_state")

    @property
    def n_state(self) -> int:
        return self.q.shape[-1]

    @property
    def n_u(self) -> int:
        return self.r.shape[-1]

    def validate_costs(self) -> None:
        """PSD/PD checks; raises ConfigurationError on violation."""
        qs = 0.5 * (self.q + np.swapaxes(self.q, -1, -2))
        if float(np.min(np.linalg.eigvalsh(qs))) < -1e-10:
            raise ConfigurationError("state cost has eigenvalue below -1e-10")
        rs = 0.5 * (self.r + np.swapaxes(self.r, -1, -2))
        if float(np.min(np.linalg.eigvalsh(rs))) < 1e-12:
            raise ConfigurationError("input cost is not positive definite")


def stage_input_box(n_u: int, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Box bounds lo <= u <= hi as half-space rows."""
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n_u,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n_u,))
    C = np.vstack([np.eye(n_u), -np.eye(n_u)])
    d = np.concatenate([hi, -lo])
    return C, d


@dataclass
class StandardFormCost:
    """Quadratic cost mapped to x'Qx + q'x form: the linear terms absorb the
    references (q = -2 Q x_ref), constants dropped."""

    q_blocks: np.ndarray  # (M, N+1, n_state, n_state)
    q_lin: np.ndarray  # (M, N+1, n_state)
    r_blocks: np.ndarray  # (N, n_u, n_u)
    r_lin: np.ndarray  # (N, n_u)


def cost_to_standard_form(spec: OcpSpec) -> StandardFormCost:
    q_lin = -2.0 * np.einsum("mkab,mkb->mka", spec.q, spec.x_ref)
    r_lin = -2.0 * np.einsum("kab,kb->ka", spec.r, spec.u_ref)
    return StandardFormCost(spec.q, q_lin, spec.r, r_lin)


def _padded_neighborhood(lin: LinearizedDynamics):
    """Closed-neighborhood slot table; slot 0 is the node itself, padding
    points at a phantom all-zero node M with zero coupling blocks."""
    topo = lin.topology
    M = topo.node_count
    S = 1 + max((len(ns) for ns in topo.in_neighbors), default=0)
    nbr_idx = np.full((M, S), M, dtype=np.intp)
    nbr_idx[:, 0] = np.arange(M)
    edge_slot = np.empty(len(topo.edges), dtype=np.intp)
    pos = 0
    for i, ns in enumerate(topo.in_neighbors):
        for s, j in enumerate(ns):
            nbr_idx[i, s + 1] = j
            edge_slot[pos] = s + 1
            pos += 1
    N, _, nx, _ = lin.a_self.shape
    a_pad = np.zeros((N, M, S, nx, nx))
    a_pad[:, :, 0] = lin.a_self
    if len(topo.edges) > 0:
        dst = np.array([e[0] for e in topo.edges], dtype=np.intp)
        a_pad[:, dst, edge_slot] = lin.a_nbr
    return nbr_idx, a_pad


def condense_gammas(
    lin: LinearizedDynamics, x0: np.ndarray, threads: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Per-node prediction maps by forward substitution.

    Returns (gamma_u, gamma_x) of shapes (M, N+1, n_state, N*n_u) and
    (M, N+1, n_state); stacking stage rows of node i gives the maps
    satisfying x^i = Gamma_u^i u + Gamma_x^i for the stacked input u.

    At step n each node reads only the stage-n rows of its closed
    neighborhood (a view, nothing materialized) and writes its own
    stage-(n+1) rows, so work and memory grow linearly in the node count.
    """
    topo = lin.topology
    M = topo.node_count
    N = lin.horizon
    nx, nu = lin.n_state, lin.n_u
    x0 = np.asarray(x0, dtype=float).reshape(M, nx)
    nbr_idx, a_pad = _padded_neighborhood(lin)

    # Work on [Gamma_x | Gamma_u] jointly (column 0 is Gamma_x, driven by
    # the offsets) so each stage is a single gather + block product. One
    # phantom all-zero node at index M keeps gathers branch-free.
    work = np.zeros((M + 1, N + 1, nx, 1 + N * nu))
    work[:M, 0, :, 0] = x0

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    chunks = np.array_split(np.arange(M), threads) if threads > 1 else [np.arange(M)]

    def advance(rows, n):
        cols = 1 + n * nu
        prev = work[:, n, :, :cols][nbr_idx[rows]]  # (m, S, nx, cols)
        new = (a_pad[n, rows] @ prev).sum(axis=1)
        new[..., 0] += lin.c[n, rows]
        work[rows, n + 1, :, :cols] = new
        work[rows, n + 1, :, cols : cols + nu] = lin.b[n, rows]

    try:
        for n in range(N):
            if pool is None:
                advance(chunks[0], n)
            else:
                list(pool.map(lambda rows, n=n: advance(rows, n), chunks))
    finally:
        if pool is not None:
            pool.shutdown()
    return work[:M, :, :, 1:], work[:M, :, :, 0]


def local_hessian_gradient(
    gamma_u: np.ndarray, gamma_x: np.ndarray, q_blocks: np.ndarray, q_lin: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One node's Hessian and gradient contribution.

    gamma_u: (N+1, n_state, N*n_u), gamma_x: (N+1, n_state),
    q_blocks: (N+1, n_state, n_state), q_lin: (N+1, n_state).
    """
    qg = q_blocks @ gamma_u  # (N+1, n_state, N*n_u)
    h = np.einsum("kac,kab->cb", gamma_u, qg)
    w = 2.0 * (q_blocks @ gamma_x[..., None])[..., 0] + q_lin
    g = np.einsum("kab,ka->b", gamma_u, w)
    return 0.5 * (h + h.T), g


@dataclass
class LocalCondensed:
    """One node's condensed quantities: prediction maps, cost contribution
    and its state-constraint rows mapped to input space."""

    node: int
    gamma_u: np.ndarray  # (N+1, n_state, N*n_u)
    gamma_x: np.ndarray  # (N+1, n_state)
    h: np.ndarray  # (N*n_u, N*n_u)
    g: np.ndarray  # (N*n_u,)
    c_rows: np.ndarray  # (rows, N*n_u)
    d_rows: np.ndarray  # (rows,)
    soft: np.ndarray  # (rows,) bool
    rho1: np.ndarray  # (rows,)
    rho2: np.ndarray  # (rows,)


def _node_constraint_rows(spec: OcpSpec, i: int, gamma_u_i, gamma_x_i, n_cols: int):
    rows, rhs, soft, r1, r2 = [], [], [], [], []
    for sc in sorted(
        (s for s in spec.state_constraints if s.node == i), key=lambda s: s.stage
    ):
        rows.append(sc.c @ gamma_u_i[sc.stage])
        rhs.append(sc.d - sc.c @ gamma_x_i[sc.stage])
        m = sc.c.shape[0]
        soft.extend([sc.soft] * m)
        r1.extend([sc.rho1] * m)
        r2.extend([sc.rho2] * m)
    if rows:
        return (
            np.vstack(rows), np.concatenate(rhs),
            np.array(soft, dtype=bool), np.array(r1), np.array(r2),
        )
    return (
        np.zeros((0, n_cols)), np.zeros(0),
        np.zeros(0, dtype=bool), np.zeros(0), np.zeros(0),
    )


def condense_local(spec: OcpSpec, lin: LinearizedDynamics, x0: np.ndarray) -> list[LocalCondensed]:
    """Per-node condensing: recursion plus local cost/constraint mapping."""
    cost = cost_to_standard_form(spec)
    gu, gx = condense_gammas(lin, x0)
    n_cols = spec.horizon * spec.n_u
    out = []
    for i in range(spec.topology.node_count):
        h, g = local_hessian_gradient(gu[i], gx[i], cost.q_blocks[i], cost.q_lin[i])
        c_rows, d_rows, soft, r1, r2 = _node_constraint_rows(spec, i, gu[i], gx[i], n_cols)
        out.append(LocalCondensed(i, gu[i], gx[i], h, g, c_rows, d_rows, soft, r1, r2))
    return out


@dataclass
class CondensedQp:
    """Inputs-only QP min u'Hu + g'u s.t. C u <= d, with per-row softness
    metadata for rows that may be relaxed by penalized slacks."""

    h: np.ndarray
    g: np.ndarray
    c: np.ndarray
    d: np.ndarray
    soft: np.ndarray  # (rows,) bool
    rho1: np.ndarray
    rho2: np.ndarray


def _input_constraint_rows(spec: OcpSpec) -> tuple[np.ndarray, np.ndarray]:
    N, nu = spec.horizon, spec.n_u
    n_cols = N * nu
    if spec.input_constraints is None:
        return np.zeros((0, n_cols)), np.zeros(0)
    blocks, rhs = [], []
    for k, (C, d) in enumerate(spec.input_constraints):
        row = np.zeros((C.shape[0], n_cols))
        row[:, k * nu : (k + 1) * nu] = C
        blocks.append(row)
        rhs.append(d)
    return np.vstack(blocks), np.concatenate(rhs)


def _r_bar(cost: StandardFormCost) -> tuple[np.ndarray, np.ndarray]:
    N, nu = cost.r_blocks.shape[0], cost.r_blocks.shape[-1]
    rb = np.zeros((N * nu, N * nu))
    for k in range(N):
        rb[k * nu : (k + 1) * nu, k * nu : (k + 1) * nu] = cost.r_blocks[k]
    return rb, cost.r_lin.reshape(-1)


def assemble_qp(spec: OcpSpec, locals_: list[LocalCondensed]) -> CondensedQp:
    """Sum per-node cost contributions (ascending node order) and stack
    constraint rows: input rows first, then each node's block."""
    cost = cost_to_standard_form(spec)
    rb, r_lin = _r_bar(cost)
    h = rb.copy()
    g = r_lin.copy()
    for lc in locals_:
        h += lc.h
        g += lc.g
    cu, du = _input_constraint_rows(spec)
    c_all = [cu]
    d_all = [du]
    soft = [np.zeros(cu.shape[0], dtype=bool)]
    rho1 = [np.zeros(cu.shape[0])]
    rho2 = [np.zeros(cu.shape[0])]
    for lc in locals_:
        c_all.append(lc.c_rows)
        d_all.append(lc.d_rows)
        soft.append(lc.soft)
        rho1.append(lc.rho1)
        rho2.append(lc.rho2)
    return CondensedQp(
        h=0.5 * (h + h.T), g=g,
        c=np.vstack(c_all), d=np.concatenate(d_all),
        soft=np.concatenate(soft), rho1=np.concatenate(rho1), rho2=np.concatenate(rho2),
    )


def condense_ocp(
    spec: OcpSpec,
    lin: LinearizedDynamics,
    x0: np.ndarray,
    threads: int = 1,
    gammas: tuple[np.ndarray, np.ndarray] | None = None,
) -> CondensedQp:
    """Fused production path: identical output to per-node condensing plus
    assembly, with the Hessian accumulated stage-by-stage across all nodes
    in single large products instead of one matrix per node.

    Pass precomputed `gammas` to reuse prediction maps (the control loop
    also needs them for state reconstruction)."""
    M = spec.topology.node_count
    N, nx, nu = spec.horizon, spec.n_state, spec.n_u
    cost = cost_to_standard_form(spec)
    gu, gx = gammas if gammas is not None else condense_gammas(lin, x0, threads=threads)
    rb, r_lin = _r_bar(cost)
    h = rb
    g = r_lin.copy()
    for k in range(1, N + 1):
        cols = min(k, N) * nu
        gk = gu[:, k, :, :cols]
        qgk = cost.q_blocks[:, k] @ gk
        h[:cols, :cols] += np.tensordot(gk, qgk, axes=([0, 1], [0, 1]))
        wk = 2.0 * (cost.q_blocks[:, k] @ gx[:, k, :, None])[..., 0] + cost.q_lin[:, k]
        g[:cols] += np.einsum("mab,ma->b", gk, wk)
    cu, du = _input_constraint_rows(spec)
    c_all, d_all = [cu], [du]
    soft = [np.zeros(cu.shape[0], dtype=bool)]
    rho1 = [np.zeros(cu.shape[0])]
    rho2 = [np.zeros(cu.shape[0])]
    for i in range(M):
        cr, dr, sf, r1, r2 = _node_constraint_rows(spec, i, gu[i], gx[i], N * nu)
        c_all.append(cr)
        d_all.append(dr)
        soft.append(sf)
        rho1.append(r1)
        rho2.append(r2)
    return CondensedQp(
        h=0.5 * (h + h.T), g=g,
        c=np.vstack(c_all), d=np.concatenate(d_all),
        soft=np.concatenate(soft), rho1=np.concatenate(rho1), rho2=np.concatenate(rho2),
    )


def reconstruct_states(gamma_u: np.ndarray, gamma_x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Planned per-node state trajectories x^i = Gamma_u^i u + Gamma_x^i.

    gamma_u: (M, N+1, n_state, N*n_u) or a single node's (N+1, ...) maps.
    Returns matching (M, N+1, n_state) or (N+1, n_state).
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    return gamma_u @ u + gamma_x


def expand_soft_constraints(qp: CondensedQp):
    """Augment the QP with one penalized slack per soft row.

    Returns (H, g, C, d, n_original) over the stacked decision [u; s] with
    rows C_soft u - s <= d_soft and s >= 0, cost + rho1's + s'diag(rho2)s.
    """
    idx = np.flatnonzero(qp.soft)
    n = qp.h.shape[0]
    if idx.size == 0:
        return qp.h, qp.g, qp.c, qp.d, n
    ns = idx.size
    H = np.zeros((n + ns, n + ns))
    H[:n, :n] = qp.h
    H[n:, n:] = np.diag(qp.rho2[idx])
    g = np.concatenate([qp.g, qp.rho1[idx]])
    C = np.zeros((qp.c.shape[0] + ns, n + ns))
    C[: qp.c.shape[0], :n] = qp.c
    C[idx, n + np.arange(ns)] = -1.0
    C[qp.c.shape[0] + np.arange(ns), n + np.arange(ns)] = -1.0
    d = np.concatenate([qp.d, np.zeros(ns)])
    return H, g, C, d, n


# Dense classical route, used as the numerical oracle for the sparse path.

def full_dynamics_matrices(lin: LinearizedDynamics):
    """Assemble stage matrices over the full stacked state (small M only)."""
    topo = lin.topology
    M, N = topo.node_count, lin.horizon
    nx, nu = lin.n_state, lin.n_u
    A = np.zeros((N, M * nx, M * nx))
    B = np.zeros((N, M * nx, nu))
    c = np.zeros((N, M * nx))
    for k in range(N):
        for i in range(M):
            A[k, i * nx : (i + 1) * nx, i * nx : (i + 1) * nx] = lin.a_self[k, i]
            B[k, i * nx : (i + 1) * nx] = lin.b[k, i]
            c[k, i * nx : (i + 1) * nx] = lin.c[k, i]
        for e, (di, sj) in enumerate(topo.edges):
            A[k, di * nx : (di + 1) * nx, sj * nx : (sj + 1) * nx] = lin.a_nbr[k, e]
    return A, B, c


def dense_condense_oracle(
    spec: OcpSpec, lin: LinearizedDynamics, x0: np.ndarray
) -> CondensedQp:
    """Classical condensing with explicit full-size prediction matrices.

    Numerically identical target for the per-node path; refuses problems
    with more than DENSE_ORACLE_ROW_LIMIT stacked state rows.
    """
    topo = lin.topology
    M, N = topo.node_count, lin.horizon
    nx, nu = lin.n_state, lin.n_u
    n_x = M * nx
    if n_x * (N + 1) > DENSE_ORACLE_ROW_LIMIT:
        raise ValueError(
            f"dense oracle limited to {DENSE_ORACLE_ROW_LIMIT} stacked rows, got {n_x * (N + 1)}"
        )
    A, B, c = full_dynamics_matrices(lin)
    x0 = np.asarray(x0, dtype=float).reshape(-1)

    Gu = np.zeros(((N + 1) * n_x, N * nu))
    Gx = np.zeros((N + 1) * n_x)
    Gx[:n_x] = x0
    for k in range(N):
        r0, r1 = (k + 1) * n_x, (k + 2) * n_x
        p0, p1 = k * n_x, (k + 1) * n_x
        Gx[r0:r1] = A[k] @ Gx[p0:p1] + c[k]
        Gu[r0:r1] = A[k] @ Gu[p0:p1]
        Gu[r0:r1, k * nu : (k + 1) * nu] = B[k]

    cost = cost_to_standard_form(spec)
    Qbig = np.zeros(((N + 1) * n_x, (N + 1) * n_x))
    qbig = np.zeros((N + 1) * n_x)
    for k in range(N + 1):
        for i in range(M):
            r = k * n_x + i * nx
            Qbig[r : r + nx, r : r + nx] = cost.q_blocks[i, k]
            qbig[r : r + nx] = cost.q_lin[i, k]
    rb, r_lin = _r_bar(cost)

    H = Gu.T @ Qbig @ Gu + rb
    g = 2.0 * Gu.T @ (Qbig @ Gx) + Gu.T @ qbig + r_lin

    cu, du = _input_constraint_rows(spec)
    c_all, d_all = [cu], [du]
    soft = [np.zeros(cu.shape[0], dtype=bool)]
    rho1 = [np.zeros(cu.shape[0])]
    rho2 = [np.zeros(cu.shape[0])]
    for i in range(M):
        for sc in sorted(
            (s for s in spec.state_constraints if s.node == i), key=lambda s: s.stage
        ):
            sel = np.zeros((sc.c.shape[0], (N + 1) * n_x))
            col = sc.stage * n_x + i * nx
            sel[:, col : col + nx] = sc.c
            c_all.append(sel @ Gu)
            d_all.append(sc.d - sel @ Gx)
            m = sc.c.shape[0]
            soft.append(np.full(m, sc.soft))
            rho1.append(np.full(m, sc.rho1))
            rho2.append(np.full(m, sc.rho2))
    return CondensedQp(
        h=0.5 * (H + H.T), g=g,
        c=np.vstack(c_all), d=np.concatenate(d_all),
        soft=np.concatenate(soft), rho1=np.concatenate(rho1), rho2=np.concatenate(rho2),
    )


# Debug dump format: first line `rows cols`, then row-major values.

def write_matrix_text(path, a: np.ndarray) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    with open(path, "w") as f:
        f.write(f"{a.shape[0]} {a.shape[1]}\n")
        for row in a:
            f.write(" ".join("%.17g" % v for v in row) + "\n")


def read_matrix_text(path) -> np.ndarray:
    with open(path) as f:
        rows, cols = (int(t) for t in f.readline().split())
        a = np.array([[float(v) for v in f.readline().split()] for _ in range(rows)])
    if a.shape != (rows, cols):
        raise ValueError(f"matrix text file {path} does not match its header")
    return a


def dump_condensed_qp(out_dir, qp: CondensedQp) -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_text(out / "H.txt", qp.h)
    write_matrix_text(out / "g.txt", qp.g.reshape(1, -1))
    write_matrix_text(out / "C.txt", qp.c)
    write_matrix_text(out / "d.txt", qp.d.reshape(1, -1))
