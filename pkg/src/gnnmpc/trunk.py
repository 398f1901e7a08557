"""Desk-scale chain plant: gravity-loaded point masses with neighbor
spring-damper coupling, a restoring force toward the rest shape, and
tendon-force inputs.

Node 0 is the fixed base. The chain hangs along -z from the origin at
rest. Integration is semi-implicit Euler (velocity first, then position
with the new velocity) at a fine substep, sampled at the controller
period. All force terms are neighbor-local, so the ground truth satisfies
the same bounded-neighborhood structure the learned model assumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .dataset import Dataset
from .graph import SystemState, Trajectory


@dataclass
class ChainConfig:
    node_count: int = 4
    node_mass: float = 0.08  # kg
    coupling_stiffness: float = 300.0  # N/m
    coupling_damping: float = 2.0  # N*s/m, relative-velocity damping
    bend_stiffness: float = 25.0  # N/m toward rest shape, moving nodes only
    rest_length: float = 0.15  # m
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    tendon_directions: np.ndarray | None = None  # (n_u, 3) unit pull directions
    tendon_nodes: tuple[tuple[int, ...], ...] | None = None  # attachment sets
    u_max: float = 8.0  # N, inputs live in [0, u_max]
    dt_sim: float = 1e-3
    dt: float = 0.01

    def __post_init__(self):
        if self.node_count < 2:
            raise ValueError("need at least a base and one moving node")
        if self.node_mass <= 0 or self.coupling_stiffness <= 0:
            raise ValueError("mass and coupling stiffness must be positive")
        if self.coupling_damping < 0 or self.bend_stiffness < 0:
            raise ValueError("damping and bend stiffness must be nonnegative")
        if self.dt_sim <= 0 or self.dt <= 0:
            raise ValueError("time steps must be positive")
        ratio = self.dt / self.dt_sim
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_sim must divide dt")
        if self.tendon_directions is None:
            # three antagonistic pairs of horizontal pulls, 60 degrees apart
            angles = np.deg2rad([0, 60, 120, 180, 240, 300])
            self.tendon_directions = np.stack(
                [np.cos(angles), np.sin(angles), np.zeros(6)], axis=1
            )
        else:
            self.tendon_directions = np.asarray(self.tendon_directions, dtype=float)
        if self.tendon_nodes is None:
            moving = tuple(range(1, self.node_count))
            self.tendon_nodes = tuple(moving for _ in range(self.n_u))
        if len(self.tendon_nodes) != self.n_u:
            raise ValueError("one attachment set per tendon required")
        for nodes in self.tendon_nodes:
            for i in nodes:
                if not 1 <= i < self.node_count:
                    raise ValueError("tendons attach to moving nodes only")
        self.gravity = tuple(float(v) for v in self.gravity)

    @property
    def n_u(self) -> int:
        return self.tendon_directions.shape[0]

    @property
    def substeps(self) -> int:
        return int(round(self.dt / self.dt_sim))

    def rest_positions(self) -> np.ndarray:
        z = -self.rest_length * np.arange(self.node_count)
        out = np.zeros((self.node_count, 3))
        out[:, 2] = z
        return out

    def rest_state(self) -> SystemState:
        arr = np.zeros((self.node_count, 6))
        arr[:, :3] = self.rest_positions()
        return SystemState(arr)

    def tendon_force_map(self) -> np.ndarray:
        """(M, 3, n_u) map from tensions to per-node forces."""
        M = self.node_count
        out = np.zeros((M, 3, self.n_u))
        for t, nodes in enumerate(self.tendon_nodes):
            w = 1.0 / len(nodes)
            for i in nodes:
                out[i, :, t] = w * self.tendon_directions[t]
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tendon_directions"] = self.tendon_directions.tolist()
        d["tendon_nodes"] = [list(n) for n in self.tendon_nodes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChainConfig":
        d = dict(d)
        if d.get("tendon_directions") is not None:
            d["tendon_directions"] = np.asarray(d["tendon_directions"], dtype=float)
        if d.get("tendon_nodes") is not None:
            d["tendon_nodes"] = tuple(tuple(int(i) for i in ns) for ns in d["tendon_nodes"])
        if d.get("gravity") is not None:
            d["gravity"] = tuple(d["gravity"])
        return cls(**d)


def _accelerations(cfg: ChainConfig, p: np.ndarray, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Net force / mass; batched over leading axes of p, v (..., M, 3)."""
    g = np.asarray(cfg.gravity)
    f = np.broadcast_to(cfg.node_mass * g, p.shape).copy()

    delta = p[..., 1:, :] - p[..., :-1, :]  # segment vectors base->tip
    length = np.linalg.norm(delta, axis=-1, keepdims=True)
    length = np.maximum(length, 1e-12)
    axial = cfg.coupling_stiffness * (length - cfg.rest_length) * (delta / length)
    rel_v = v[..., 1:, :] - v[..., :-1, :]
    damp = cfg.coupling_damping * rel_v
    f[..., 1:, :] -= axial + damp
    f[..., :-1, :] += axial + damp

    rest = cfg.rest_positions()
    f[..., 1:, :] -= cfg.bend_stiffness * (p[..., 1:, :] - rest[1:])

    fm = cfg.tendon_force_map()  # (M, 3, n_u)
    f += fm @ u if u.ndim == 1 else np.einsum("mcu,...u->...mc", fm, u)
    return f / cfg.node_mass


def sim_substep(cfg: ChainConfig, p: np.ndarray, v: np.ndarray, u: np.ndarray):
    """One semi-implicit Euler substep; the base row stays pinned."""
    a = _accelerations(cfg, p, v, u)
    v = v + cfg.dt_sim * a
    v[..., 0, :] = 0.0
    p = p + cfg.dt_sim * v
    p[..., 0, :] = cfg.rest_positions()[0]
    return p, v


def step_state_array(cfg: ChainConfig, arr: np.ndarray, u: np.ndarray, clip_inputs: bool = True) -> np.ndarray:
    """Advance raw (..., M, 6) state arrays by one controller period."""
    u = np.asarray(u, dtype=float)
    if clip_inputs:
        u = np.clip(u, 0.0, cfg.u_max)
    p = arr[..., :3].copy()
    v = arr[..., 3:].copy()
    for _ in range(cfg.substeps):
        p, v = sim_substep(cfg, p, v, u)
    out = np.concatenate([p, v], axis=-1)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("simulation blew up: non-finite state")
    return out


def sim_step(cfg: ChainConfig, state: SystemState, u) -> SystemState:
    u = u.u if hasattr(u, "u") else np.asarray(u, dtype=float)
    return SystemState(step_state_array(cfg, state.array, u))


def mechanical_energy(cfg: ChainConfig, state: SystemState) -> float:
    """Kinetic + elastic (coupling, rest-shape) + gravitational energy."""
    p, v = state.positions, state.velocities
    kin = 0.5 * cfg.node_mass * float(np.sum(v * v))
    delta = p[1:] - p[:-1]
    stretch = np.linalg.norm(delta, axis=-1) - cfg.rest_length
    elastic = 0.5 * cfg.coupling_stiffness * float(np.sum(stretch**2))
    rest = cfg.rest_positions()
    bend = 0.5 * cfg.bend_stiffness * float(np.sum((p[1:] - rest[1:]) ** 2))
    grav = -cfg.node_mass * float(np.sum(p @ np.asarray(cfg.gravity)))
    return kin + elastic + bend + grav


def settle(cfg: ChainConfig, seconds: float = 3.0, u=None) -> SystemState:
    """Run the plant with a constant input until transients decay."""
    u = np.zeros(cfg.n_u) if u is None else np.asarray(u, dtype=float)
    arr = cfg.rest_state().array
    for _ in range(int(round(seconds / cfg.dt))):
        arr = step_state_array(cfg, arr, u)
    return SystemState(arr)


@dataclass
class InputSignalConfig:
    kind: str = "random-walk"  # or "quasi-periodic"
    step_scale: float = 0.25  # N per sample, random-walk increments
    amplitude_range: tuple[float, float] = (0.5, 2.0)
    period_range: tuple[float, float] = (1.0, 4.0)
    sinusoids_range: tuple[int, int] = (2, 3)
    duration: float = 20.0
    u_max: float = 8.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("random-walk", "quasi-periodic"):
            raise ValueError(f"unknown input signal kind {self.kind!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")


def generate_inputs(cfg: InputSignalConfig, n_u: int, dt: float, rng=None) -> np.ndarray:
    """Excitation signal of shape (n_steps, n_u), clipped to [0, u_max]."""
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    n = int(round(cfg.duration / dt))
    mid = 0.5 * cfg.u_max
    if cfg.kind == "random-walk":
        eta = rng.uniform(-cfg.step_scale, cfg.step_scale, size=(n, n_u))
        u = np.empty((n, n_u))
        cur = np.full(n_u, mid)
        for k in range(n):
            cur = np.clip(cur + eta[k], 0.0, cfg.u_max)
            u[k] = cur
        return u
    # quasi-periodic: per-channel sums of a few sinusoids around mid-range,
    # amplitudes rescaled so the sum stays inside [0, u_max]
    t = np.arange(n) * dt
    u = np.empty((n, n_u))
    cap = 0.95 * min(mid, cfg.u_max - mid)
    for ch in range(n_u):
        n_s = int(rng.integers(cfg.sinusoids_range[0], cfg.sinusoids_range[1] + 1))
        amps = rng.uniform(*cfg.amplitude_range, size=n_s)
        total = amps.sum()
        if total > cap:
            amps *= cap / total
        periods = rng.uniform(*cfg.period_range, size=n_s)
        phases = rng.uniform(0, 2 * np.pi, size=n_s)
        sig = mid + sum(
            a * np.sin(2 * np.pi * t / T + ph) for a, T, ph in zip(amps, periods, phases)
        )
        u[:, ch] = sig
    return np.clip(u, 0.0, cfg.u_max)


def simulate_trajectory(cfg: ChainConfig, x0: SystemState, inputs: np.ndarray) -> Trajectory:
    states = np.empty((inputs.shape[0] + 1, cfg.node_count, 6))
    states[0] = x0.array
    for k in range(inputs.shape[0]):
        states[k + 1] = step_state_array(cfg, states[k], inputs[k])
    return Trajectory(states=states, inputs=np.clip(inputs, 0.0, cfg.u_max), dt=cfg.dt)


def generate_trajectories(
    cfg: ChainConfig,
    signal_cfg: InputSignalConfig,
    n_trajectories: int,
    seconds_each: float | None = None,
    seed: int = 0,
    start_state: SystemState | None = None,
) -> list[Trajectory]:
    """Independent excitation runs from slightly perturbed start states.

    Each trajectory draws its inputs and start-state noise from its own
    RNG stream derived from the seed, so the output is reproducible for
    identical arguments. All runs share a length, so the simulation
    advances them together as one batch.
    """
    base = start_state if start_state is not None else settle(cfg)
    streams = np.random.SeedSequence(seed).spawn(n_trajectories)
    sig_kwargs = {**_signal_dict(signal_cfg), "duration": seconds_each or signal_cfg.duration}
    all_inputs, starts = [], []
    for ss in streams:
        rng = np.random.default_rng(ss)
        inputs = generate_inputs(InputSignalConfig(**sig_kwargs), cfg.n_u, cfg.dt, rng=rng)
        arr = base.array.copy()
        noise = rng.uniform(-0.05, 0.05, size=(cfg.node_count - 1, 3)) * cfg.rest_length
        arr[1:, :3] += noise
        all_inputs.append(np.clip(inputs, 0.0, cfg.u_max))
        starts.append(arr)
    U = np.stack(all_inputs, axis=1)  # (T, n_traj, n_u)
    states = np.empty((U.shape[0] + 1, n_trajectories, cfg.node_count, 6))
    states[0] = np.stack(starts)
    for k in range(U.shape[0]):
        states[k + 1] = step_state_array(cfg, states[k], U[k])
    return [
        Trajectory(states=states[:, i], inputs=U[:, i], dt=cfg.dt)
        for i in range(n_trajectories)
    ]


def _signal_dict(sig: InputSignalConfig) -> dict:
    return {
        "kind": sig.kind,
        "step_scale": sig.step_scale,
        "amplitude_range": tuple(sig.amplitude_range),
        "period_range": tuple(sig.period_range),
        "sinusoids_range": tuple(sig.sinusoids_range),
        "duration": sig.duration,
        "u_max": sig.u_max,
        "rng_seed": sig.rng_seed,
    }


def generate_dataset(
    cfg: ChainConfig,
    signal_cfg: InputSignalConfig,
    n_trajectories: int,
    seconds_each: float,
    seed: int = 0,
    val_fraction: float = 0.1,
) -> tuple[list[Trajectory], Dataset]:
    trajs = generate_trajectories(cfg, signal_cfg, n_trajectories, seconds_each, seed)
    dataset = Dataset.from_trajectories(trajs, val_fraction=val_fraction, seed=seed)
    return trajs, dataset


def save_chain_config(path, cfg: ChainConfig) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=1)


def load_chain_config(path) -> ChainConfig:
    with open(path) as f:
        return ChainConfig.from_dict(json.load(f))
