"""Graph topology and state value types shared across the package.

Node indices are 0-based everywhere in code. Each node carries a position
and a velocity of equal length ``n_p``, so the per-node state dimension is
``2 * n_p`` with layout ``[p, v]``. The flattened system state concatenates
per-node states in ascending node order.

All value types are immutable after construction: backing arrays are
copied on the way in and marked read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class GraphTopology:
    """Directed interaction structure: ``in_neighbors[i]`` lists the nodes
    whose state influences node ``i`` (excluding ``i`` itself, which is
    always an implicit self-influence)."""

    node_count: int
    in_neighbors: tuple[tuple[int, ...], ...]
    neighbor_bound: int

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if self.neighbor_bound < 1:
            raise ValueError("neighbor_bound must be >= 1")
        if len(self.in_neighbors) != self.node_count:
            raise ValueError("in_neighbors must have one entry per node")
        object.__setattr__(
            self, "in_neighbors", tuple(tuple(int(j) for j in ns) for ns in self.in_neighbors)
        )
        for i, ns in enumerate(self.in_neighbors):
            if len(ns) > self.neighbor_bound:
                raise ValueError(f"node {i} has {len(ns)} neighbors > bound {self.neighbor_bound}")
            if len(set(ns)) != len(ns):
                raise ValueError(f"node {i} has duplicate neighbors")
            for j in ns:
                if not 0 <= j < self.node_count:
                    raise ValueError(f"node {i} references out-of-range neighbor {j}")
                if j == i:
                    raise ValueError(f"node {i} lists itself as neighbor; self-coupling is implicit")

    def closed_neighbors(self, i: int) -> tuple[int, ...]:
        """Self plus in-neighbors, self first."""
        return (i,) + self.in_neighbors[i]

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Directed edges (dst, src) in node-major, neighbor-list order."""
        return [(i, j) for i in range(self.node_count) for j in self.in_neighbors[i]]


def chain_topology(node_count: int) -> GraphTopology:
    """Chain graph: node i couples to i-1 and i+1 where they exist; d = 2."""
    if node_count < 1:
        raise ValueError("node_count must be >= 1")
    nbrs = []
    for i in range(node_count):
        ns = [j for j in (i - 1, i + 1) if 0 <= j < node_count]
        nbrs.append(tuple(ns))
    return GraphTopology(node_count=node_count, in_neighbors=tuple(nbrs), neighbor_bound=2)


@dataclass(frozen=True)
class NodeState:
    """Position/velocity pair for a single node."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        p = _frozen(np.atleast_1d(self.position))
        v = _frozen(np.atleast_1d(self.velocity))
        if p.ndim != 1 or v.ndim != 1 or p.shape != v.shape:
            raise ValueError("position and velocity must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise ValueError("node state entries must be finite")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "velocity", v)

    @property
    def n_p(self) -> int:
        return self.position.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass(frozen=True)
class SystemState:
    """Stacked per-node states, backed by an (M, 2*n_p) array."""

    array: np.ndarray  # (M, 2*n_p), row i = [p_i, v_i]

    def __post_init__(self):
        a = _frozen(self.array)
        if a.ndim != 2 or a.shape[1] % 2 != 0:
            raise ValueError("state array must be (M, 2*n_p)")
        if not np.all(np.isfinite(a)):
            raise ValueError("state entries must be finite")
        object.__setattr__(self, "array", a)

    @classmethod
    def from_nodes(cls, nodes) -> "SystemState":
        rows = [n.as_vector() for n in nodes]
        return cls(np.stack(rows))

    @property
    def node_count(self) -> int:
        return self.array.shape[0]

    @property
    def n_p(self) -> int:
        return self.array.shape[1] // 2

    @property
    def positions(self) -> np.ndarray:
        return self.array[:, : self.n_p]

    @property
    def velocities(self) -> np.ndarray:
        return self.array[:, self.n_p :]

    def node(self, i: int) -> NodeState:
        return NodeState(self.array[i, : self.n_p], self.array[i, self.n_p :])

    @property
    def nodes(self) -> list[NodeState]:
        return [self.node(i) for i in range(self.node_count)]


@dataclass(frozen=True)
class InputVector:
    """Global actuator input."""

    u: np.ndarray

    def __post_init__(self):
        u = _frozen(np.atleast_1d(self.u))
        if u.ndim != 1:
            raise ValueError("input must be a 1-D vector")
        if not np.all(np.isfinite(u)):
            raise ValueError("input entries must be finite")
        object.__setattr__(self, "u", u)

    @property
    def n_u(self) -> int:
        return self.u.shape[0]


def flatten_state(s: SystemState) -> np.ndarray:
    """Concatenate node states [p_0, v_0, p_1, v_1, ...] into one vector."""
    return s.array.reshape(-1).copy()


def unflatten_state(x: np.ndarray, node_count: int) -> SystemState:
    """Inverse of :func:`flatten_state` for a known node count."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size % node_count != 0:
        raise ValueError("flat state length must be a multiple of node_count")
    return SystemState(x.reshape(node_count, -1))


@dataclass(frozen=True)
class Trajectory:
    """A sampled run: N+1 states and the N inputs between them."""

    states: np.ndarray  # (N+1, M, 2*n_p)
    inputs: np.ndarray  # (N, n_u)
    dt: float

    def __post_init__(self):
        s = _frozen(self.states)
        u = _frozen(self.inputs)
        if s.ndim != 3 or u.ndim != 2:
            raise ValueError("states must be (N+1, M, 2*n_p), inputs (N, n_u)")
        if s.shape[0] != u.shape[0] + 1:
            raise ValueError("need exactly one more state than inputs")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "inputs", u)

    @property
    def n_steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def node_count(self) -> int:
        return self.states.shape[1]

    def state(self, k: int) -> SystemState:
        return SystemState(self.states[k])

    def input(self, k: int) -> InputVector:
        return InputVector(self.inputs[k])


# Trajectory CSV layout (shared repo-wide): header `t,u_1..u_{n_u},x_1..x_{n_x}`,
# one row per timestep at spacing dt. The terminal row has no applied input;
# its u columns are written as zeros and ignored on read.

_FMT = "%.17g"


def write_trajectory_csv(path, traj: Trajectory) -> None:
    n_u = traj.inputs.shape[1]
    n_steps = traj.n_steps
    n_x = traj.states.shape[1] * traj.states.shape[2]
    header = ["t"] + [f"u_{i+1}" for i in range(n_u)] + [f"x_{i+1}" for i in range(n_x)]
    u_full = np.vstack([traj.inputs, np.zeros((1, n_u))])
    flat = traj.states.reshape(n_steps + 1, n_x)
    t = np.arange(n_steps + 1) * traj.dt
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for k in range(n_steps + 1):
            row = np.concatenate([[t[k]], u_full[k], flat[k]])
            f.write(",".join(_FMT % v for v in row) + "\n")


def read_trajectory_csv(path, node_count: int) -> Trajectory:
    with open(path) as f:
        header = f.readline().strip().split(",")
        rows = np.array([[float(v) for v in line.split(",")] for line in f if line.strip()])
    n_u = sum(1 for h in header if h.startswith("u_"))
    n_x = sum(1 for h in header if h.startswith("x_"))
    if rows.shape[1] != 1 + n_u + n_x:
        raise ValueError(f"malformed trajectory CSV {path}")
    t = rows[:, 0]
    if len(t) < 2:
        raise ValueError("trajectory CSV needs at least two rows")
    dt = float(t[1] - t[0])
    states = rows[:, 1 + n_u :].reshape(len(rows), node_count, -1)
    inputs = rows[:-1, 1 : 1 + n_u]
    return Trajectory(states=states, inputs=inputs, dt=dt)
