"""Message-passing dynamics model and its exact per-node linearization.

One step of the learned dynamics, for each node i:

    m_i  = sum_{j in N_i} psi((x_i - x_j) / s_x)
    v_i' = v_i + phi((x_i - mu_x)/s_x, m_i, (u - mu_u)/s_u)
    p_i' = p_i + dt * v_i'

psi and phi are shared across nodes; the velocity update runs first and the
position integrates the *new* velocity. Normalization statistics live in the
model so callers always work in raw physical units.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass

import numpy as np

from .graph import GraphTopology, InputVector, SystemState, Trajectory
from .mlp import MlpParams, mlp_forward, mlp_jacobian


@dataclass
class Normalization:
    state_mean: np.ndarray  # (2*n_p,)
    state_scale: np.ndarray  # (2*n_p,), strictly positive
    input_mean: np.ndarray  # (n_u,)
    input_scale: np.ndarray  # (n_u,), strictly positive

    def __post_init__(self):
        for name in ("state_mean", "state_scale", "input_mean", "input_scale"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.state_scale <= 0) or np.any(self.input_scale <= 0):
            raise ValueError("normalization scales must be positive")

    @classmethod
    def identity(cls, n_state: int, n_u: int) -> "Normalization":
        return cls(np.zeros(n_state), np.ones(n_state), np.zeros(n_u), np.ones(n_u))


@dataclass
class GnnModel:
    """Learned forward dynamics: edge MLP psi, node MLP phi, sampling period."""

    psi: MlpParams
    phi: MlpParams
    dt: float
    n_p: int
    n_u: int
    n_m: int
    normalization: Normalization

    def __post_init__(self):
        nx = 2 * self.n_p
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.psi.in_dim != nx:
            raise ValueError(f"psi input dim {self.psi.in_dim} != node state dim {nx}")
        if self.psi.out_dim != self.n_m:
            raise ValueError("psi output dim != n_m")
        if self.phi.in_dim != nx + self.n_m + self.n_u:
            raise ValueError("phi input dim != n_state + n_m + n_u")
        if self.phi.out_dim != self.n_p:
            raise ValueError("phi output dim != n_p")
        if self.normalization.state_mean.shape != (nx,):
            raise ValueError("normalization state stats must have node-state length")
        if self.normalization.input_mean.shape != (self.n_u,):
            raise ValueError("normalization input stats must have input length")

    @property
    def n_state(self) -> int:
        return 2 * self.n_p

    def copy(self) -> "GnnModel":
        return GnnModel(
            self.psi.copy(), self.phi.copy(), self.dt, self.n_p, self.n_u, self.n_m,
            Normalization(
                self.normalization.state_mean.copy(), self.normalization.state_scale.copy(),
                self.normalization.input_mean.copy(), self.normalization.input_scale.copy(),
            ),
        )


def init_model(
    n_p: int,
    n_u: int,
    dt: float,
    rng: np.random.Generator,
    n_m: int = 16,
    psi_hidden: tuple[int, ...] = (32, 32),
    phi_hidden: tuple[int, ...] = (64, 64),
    normalization: Normalization | None = None,
    out_scale: float = 1.0,
) -> GnnModel:
    from .mlp import mlp_init

    nx = 2 * n_p
    psi = mlp_init([nx, *psi_hidden, n_m], rng)
    phi = mlp_init([nx + n_m + n_u, *phi_hidden, n_p], rng, out_scale=out_scale)
    norm = normalization or Normalization.identity(nx, n_u)
    return GnnModel(psi=psi, phi=phi, dt=dt, n_p=n_p, n_u=n_u, n_m=n_m, normalization=norm)


@functools.lru_cache(maxsize=64)
def _edge_index(topo: GraphTopology):
    """Edge arrays and the padded gather table used for message aggregation.

    gather[i, s] is the position in the edge list of node i's s-th incoming
    edge, padded with E (a phantom all-zero message row).
    """
    edges = topo.edges
    E = len(edges)
    dst = np.array([e[0] for e in edges], dtype=np.intp)
    src = np.array([e[1] for e in edges], dtype=np.intp)
    deg = [len(ns) for ns in topo.in_neighbors]
    d_max = max(deg) if deg else 0
    gather = np.full((topo.node_count, max(d_max, 1)), E, dtype=np.intp)
    pos = 0
    for i, ns in enumerate(topo.in_neighbors):
        for s in range(len(ns)):
            gather[i, s] = pos
            pos += 1
    return dst, src, gather


def _forward_parts(model: GnnModel, topo: GraphTopology, X: np.ndarray, U: np.ndarray):
    """Shared forward computation, batched over leading axes.

    X: (..., M, n_state), U: (..., n_u). Returns the normalized edge
    features, messages, aggregated messages, phi input and phi output.
    """
    norm = model.normalization
    dst, src, gather = _edge_index(topo)
    H = (X - norm.state_mean) / norm.state_scale
    e_feat = (X[..., dst, :] - X[..., src, :]) / norm.state_scale  # (..., E, n_state)
    if len(dst) > 0:
        msg = mlp_forward(model.psi, e_feat)
        pad = np.zeros(msg.shape[:-2] + (1, model.n_m))
        msg_ext = np.concatenate([msg, pad], axis=-2)
        agg = msg_ext[..., gather, :].sum(axis=-2)  # (..., M, n_m)
    else:
        agg = np.zeros(X.shape[:-1] + (model.n_m,))
    Un = (U - norm.input_mean) / norm.input_scale
    Ub = np.broadcast_to(Un[..., None, :], X.shape[:-1] + (model.n_u,))
    z = np.concatenate([H, agg, Ub], axis=-1)
    dv = mlp_forward(model.phi, z)
    return e_feat, agg, z, dv


def step_array(model: GnnModel, topo: GraphTopology, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """One dynamics step on raw arrays; batched over leading axes."""
    n_p = model.n_p
    _, _, _, dv = _forward_parts(model, topo, X, U)
    v_new = X[..., n_p:] + dv
    p_new = X[..., :n_p] + model.dt * v_new
    return np.concatenate([p_new, v_new], axis=-1)


def gnn_step(model: GnnModel, topo: GraphTopology, x: SystemState, u: InputVector) -> SystemState:
    """One step of the learned dynamics in physical units."""
    if x.node_count != topo.node_count:
        raise ValueError("state node count does not match topology")
    if x.array.shape[1] != model.n_state:
        raise ValueError("node state dimension does not match model")
    if u.n_u != model.n_u:
        raise ValueError("input dimension does not match model")
    return SystemState(step_array(model, topo, x.array, u.u))


def rollout(model: GnnModel, topo: GraphTopology, x0: SystemState, inputs) -> Trajectory:
    """Open-loop prediction from x0 under the given input sequence."""
    U = np.stack([u.u if isinstance(u, InputVector) else np.asarray(u, float) for u in inputs])
    if U.shape[0] == 0:
        raise ValueError("inputs must be non-empty")
    states = np.empty((U.shape[0] + 1,) + x0.array.shape)
    states[0] = x0.array
    for k in range(U.shape[0]):
        states[k + 1] = step_array(model, topo, states[k], U[k])
    return Trajectory(states=states, inputs=U, dt=model.dt)


@dataclass
class LinearizedDynamics:
    """Per-stage, per-node affine dynamics blocks.

    x_i[k+1] = A_self[k,i] x_i[k] + sum_e A_nbr[k,e] x_src(e)[k] + B[k,i] u[k] + c[k,i]

    Neighbor blocks are aligned with ``topology.edges`` (node-major order).
    """

    topology: GraphTopology
    horizon: int
    a_self: np.ndarray  # (N, M, n_state, n_state)
    a_nbr: np.ndarray  # (N, E, n_state, n_state)
    b: np.ndarray  # (N, M, n_state, n_u)
    c: np.ndarray  # (N, M, n_state)

    def __post_init__(self):
        M = self.topology.node_count
        E = len(self.topology.edges)
        N = self.horizon
        nx = self.a_self.shape[-1]
        if self.a_self.shape != (N, M, nx, nx):
            raise ValueError("a_self shape mismatch")
        if self.a_nbr.shape[:2] != (N, E):
            raise ValueError("a_nbr shape mismatch")
        if self.b.shape[:2] != (N, M) or self.c.shape != (N, M, nx):
            raise ValueError("b/c shape mismatch")

    @property
    def n_state(self) -> int:
        return self.a_self.shape[-1]

    @property
    def n_u(self) -> int:
        return self.b.shape[-1]

    def a_block(self, k: int, i: int, j: int) -> np.ndarray:
        """A^{ij}_k; j must be i itself or one of i's in-neighbors."""
        if j == i:
            return self.a_self[k, i]
        for e, (di, sj) in enumerate(self.topology.edges):
            if di == i and sj == j:
                return self.a_nbr[k, e]
        raise KeyError(f"node {j} is not in the closed neighborhood of node {i}")

    def stage(self, k: int) -> "LinearizedDynamics":
        return LinearizedDynamics(
            self.topology, 1, self.a_self[k : k + 1], self.a_nbr[k : k + 1],
            self.b[k : k + 1], self.c[k : k + 1],
        )


def _linearize_batch(model: GnnModel, topo: GraphTopology, X: np.ndarray, U: np.ndarray) -> LinearizedDynamics:
    """Exact Jacobian blocks for a batch of K linearization points.

    X: (K, M, n_state), U: (K, n_u).
    """
    K, M, nx = X.shape
    n_p, n_m, n_u = model.n_p, model.n_m, model.n_u
    norm = model.normalization
    dst, src, gather = _edge_index(topo)
    E = len(dst)

    e_feat, agg, z, dv = _forward_parts(model, topo, X, U)

    J_phi = mlp_jacobian(model.phi, z)  # (K, M, n_p, nx+n_m+n_u)
    Jh = J_phi[..., :nx]
    Jm = J_phi[..., nx : nx + n_m]
    Ju = J_phi[..., nx + n_m :]

    inv_sx = 1.0 / norm.state_scale
    inv_su = 1.0 / norm.input_scale

    if E > 0:
        J_psi = mlp_jacobian(model.psi, e_feat)  # (K, E, n_m, nx)
        pad = np.zeros((K, 1, n_m, nx))
        J_psi_ext = np.concatenate([J_psi, pad], axis=1)
        J_psi_sum = J_psi_ext[:, gather].sum(axis=2)  # (K, M, n_m, nx)
        # dv'/dx_i through the node feature and all incident edge features
        Jv_self = (Jh + Jm @ J_psi_sum) * inv_sx
        # dv'/dx_j for each incoming edge (i <- j)
        Jv_nbr = -(Jm[:, dst] @ J_psi) * inv_sx  # (K, E, n_p, nx)
    else:
        Jv_self = Jh * inv_sx
        Jv_nbr = np.zeros((K, 0, n_p, nx))
    Jv_u = Ju * inv_su  # (K, M, n_p, n_u)

    # v' = v + phi(...)  and  p' = p + dt*v'
    eye_v = np.zeros((n_p, nx))
    eye_v[:, n_p:] = np.eye(n_p)
    dvdx_self = Jv_self + eye_v

    a_self = np.zeros((K, M, nx, nx))
    a_self[..., :n_p, :n_p] = np.eye(n_p)
    a_self[..., :n_p, :] += model.dt * dvdx_self
    a_self[..., n_p:, :] = dvdx_self

    a_nbr = np.zeros((K, E, nx, nx))
    a_nbr[..., :n_p, :] = model.dt * Jv_nbr
    a_nbr[..., n_p:, :] = Jv_nbr

    b = np.zeros((K, M, nx, n_u))
    b[..., :n_p, :] = model.dt * Jv_u
    b[..., n_p:, :] = Jv_u

    # Offsets make the affine model exact at the linearization point.
    f = step_array(model, topo, X, U)
    c = f - (a_self @ X[..., None])[..., 0] - (b @ U[:, None, :, None])[..., 0]
    if E > 0:
        contrib = (a_nbr @ X[:, src, :, None])[..., 0]  # (K, E, nx)
        acc = np.zeros((K, M, nx))
        np.add.at(acc, (slice(None), dst), contrib)
        c -= acc
    return LinearizedDynamics(topo, K, a_self, a_nbr, b, c)


def linearize_stage(
    model: GnnModel, topo: GraphTopology, x: SystemState, u: InputVector
) -> LinearizedDynamics:
    """Jacobian blocks of the one-step dynamics at a single point."""
    return _linearize_batch(model, topo, x.array[None], u.u[None])


def linearize_trajectory(
    model: GnnModel, topo: GraphTopology, states: np.ndarray, inputs: np.ndarray
) -> LinearizedDynamics:
    """Stage-wise linearization along a nominal trajectory.

    states: (N, M, n_state) or (N+1, ...) of which the first N are used;
    inputs: (N, n_u).
    """
    inputs = np.asarray(inputs, dtype=float)
    states = np.asarray(states, dtype=float)
    N = inputs.shape[0]
    if states.shape[0] not in (N, N + 1):
        raise ValueError("need one linearization state per stage")
    return _linearize_batch(model, topo, states[:N], inputs)


# Model file: JSON with dt, dims, normalization, and row-major weight arrays.

def save_model(model: GnnModel, path) -> None:
    def mlp_dict(m: MlpParams):
        return {
            "layer_dims": m.layer_dims,
            "weights": [W.tolist() for W in m.weights],
            "biases": [b.tolist() for b in m.biases],
        }

    doc = {
        "dt": model.dt,
        "dims": {"n_p": model.n_p, "n_u": model.n_u, "n_m": model.n_m},
        "normalization": {
            "state_mean": model.normalization.state_mean.tolist(),
            "state_scale": model.normalization.state_scale.tolist(),
            "input_mean": model.normalization.input_mean.tolist(),
            "input_scale": model.normalization.input_scale.tolist(),
        },
        "psi": mlp_dict(model.psi),
        "phi": mlp_dict(model.phi),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_model(path) -> GnnModel:
    with open(path) as f:
        doc = json.load(f)
    try:
        dims = doc["dims"]
        norm = doc["normalization"]
        psi = MlpParams(
            doc["psi"]["layer_dims"],
            [np.array(W, dtype=float) for W in doc["psi"]["weights"]],
            [np.array(b, dtype=float) for b in doc["psi"]["biases"]],
        )
        phi = MlpParams(
            doc["phi"]["layer_dims"],
            [np.array(W, dtype=float) for W in doc["phi"]["weights"]],
            [np.array(b, dtype=float) for b in doc["phi"]["biases"]],
        )
        return GnnModel(
            psi=psi,
            phi=phi,
            dt=float(doc["dt"]),
            n_p=int(dims["n_p"]),
            n_u=int(dims["n_u"]),
            n_m=int(dims["n_m"]),
            normalization=Normalization(
                norm["state_mean"], norm["state_scale"], norm["input_mean"], norm["input_scale"]
            ),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model file {path}: {exc}") from exc
