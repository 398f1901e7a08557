"""Receding-horizon control: linearize along the running trajectory,
condense, solve one QP, apply the first input, shift.

Exactly one linearize-condense-solve pass runs per control step by
default (real-time iteration); `sqp_iterations` can be raised to iterate
the linearization to a fixed point at a frozen measurement, which is how
the open-loop optimality property is tested.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .condensing import CondensedQp, OcpSpec, condense_gammas, condense_ocp, expand_soft_constraints, reconstruct_states
from .gnn import GnnModel, LinearizedDynamics, linearize_trajectory
from .graph import GraphTopology, InputVector, SystemState, Trajectory
from .qpsolver import QpProblem, QpSolution, QpStatus, SolverSettings, solve_qp

Linearizer = Callable[[np.ndarray, np.ndarray], LinearizedDynamics]


@dataclass
class MpcConfig:
    horizon: int
    dt: float
    solver: SolverSettings = field(default_factory=SolverSettings)
    warm_start: bool = True
    fallback: str = "hold-previous-input"  # or "zero-input"
    sqp_iterations: int = 1
    sqp_damping: float = 1.0  # step fraction toward each inner solution; 1 = full step
    threads: int = 1
    input_filter_tau: float | None = None  # optional first-order input smoothing

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.fallback not in ("hold-previous-input", "zero-input"):
            raise ValueError("unknown fallback policy")
        if self.sqp_iterations < 1:
            raise ValueError("sqp_iterations must be >= 1")
        if not 0.0 < self.sqp_damping <= 1.0:
            raise ValueError("sqp_damping must be in (0, 1]")


@dataclass
class StepTiming:
    linearize_ms: float = 0.0
    condense_ms: float = 0.0
    solve_ms: float = 0.0
    total_ms: float = 0.0


@dataclass
class MpcState:
    """Linearization trajectory plus bookkeeping from the last step."""

    lin_states: np.ndarray  # (N+1, M, n_state)
    lin_inputs: np.ndarray  # (N, n_u)
    step_count: int = 0
    last_applied: np.ndarray | None = None
    planned_states: np.ndarray | None = None  # (M, N+1, n_state)
    planned_inputs: np.ndarray | None = None  # (N, n_u)
    last_status: QpStatus | None = None
    last_iterations: int = 0
    last_timing: StepTiming = field(default_factory=StepTiming)
    filtered_input: np.ndarray | None = None


def mpc_init(x_measured: SystemState, cfg: MpcConfig, n_u: int) -> MpcState:
    """All linearization states start at the measurement, inputs at zero."""
    N = cfg.horizon
    states = np.tile(x_measured.array, (N + 1, 1, 1))
    return MpcState(lin_states=states, lin_inputs=np.zeros((N, n_u)))


def _as_linearizer(model, topo: GraphTopology) -> Linearizer:
    if isinstance(model, GnnModel):
        return lambda states, inputs: linearize_trajectory(model, topo, states, inputs)
    if callable(model):
        return model
    raise TypeError("model must be a GnnModel or a linearizer callable")


def _shift(states: np.ndarray, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance the trajectory one stage, duplicating the terminal entries."""
    s = np.empty_like(states)
    s[:-1] = states[1:]
    s[-1] = states[-1]
    u = np.empty_like(inputs)
    if inputs.shape[0] > 1:
        u[:-1] = inputs[1:]
    u[-1] = inputs[-1]
    return s, u


def mpc_step(
    model,
    topo: GraphTopology,
    spec: OcpSpec,
    x_measured: SystemState,
    state: MpcState,
    cfg: MpcConfig,
) -> tuple[InputVector, MpcState]:
    """One control step of the receding-horizon loop.

    Returns the applied input and the successor controller state whose
    linearization trajectory is the one-step-shifted plan.
    """
    t_start = time.perf_counter()
    linearize = _as_linearizer(model, topo)
    N = cfg.horizon
    n_u = state.lin_inputs.shape[1]

    lin_states = state.lin_states.copy()
    lin_inputs = state.lin_inputs.copy()
    lin_states[0] = x_measured.array

    timing = StepTiming()
    status: QpStatus | None = None
    iterations = 0
    solved = False

    for _ in range(cfg.sqp_iterations):
        t0 = time.perf_counter()
        lin = linearize(lin_states[:N], lin_inputs)
        timing.linearize_ms += (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        gammas = condense_gammas(lin, x_measured.array, threads=cfg.threads)
        qp = condense_ocp(spec, lin, x_measured.array, threads=cfg.threads, gammas=gammas)
        h, g, c, d, n_orig = expand_soft_constraints(qp)
        timing.condense_ms += (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        warm = None
        if cfg.warm_start:
            warm = np.zeros(h.shape[0])
            warm[: N * n_u] = lin_inputs.reshape(-1)
        settings = replace(cfg.solver, warm_start=warm)
        sol = solve_qp(QpProblem(h, g, c, d), settings)
        timing.solve_ms += (time.perf_counter() - t0) * 1e3

        status = sol.status
        iterations += sol.iterations
        if sol.status in (QpStatus.OPTIMAL, QpStatus.MAX_ITERATIONS):
            u_flat = sol.u[: N * n_u]
            planned = reconstruct_states(gammas[0], gammas[1], u_flat)  # (M, N+1, nx)
            a = cfg.sqp_damping
            lin_states = (1 - a) * lin_states + a * planned.transpose(1, 0, 2)
            lin_inputs = (1 - a) * lin_inputs + a * u_flat.reshape(N, n_u)
            solved = True
        else:
            solved = False
            break

    if solved:
        u_applied = lin_inputs[0].copy()
        planned_states = lin_states.transpose(1, 0, 2)
        planned_inputs = lin_inputs
    else:
        if cfg.fallback == "hold-previous-input" and state.last_applied is not None:
            u_applied = state.last_applied.copy()
        else:
            u_applied = np.zeros(n_u)
        # keep re-using the previous plan, advanced one stage
        lin_states = state.lin_states.copy()
        lin_states[0] = x_measured.array
        lin_inputs = state.lin_inputs.copy()
        planned_states = lin_states.transpose(1, 0, 2)
        planned_inputs = lin_inputs

    filtered = state.filtered_input
    if cfg.input_filter_tau is not None:
        alpha = cfg.dt / (cfg.input_filter_tau + cfg.dt)
        prev = filtered if filtered is not None else u_applied
        u_applied = prev + alpha * (u_applied - prev)
        filtered = u_applied.copy()

    next_states, next_inputs = _shift(lin_states, lin_inputs)
    timing.total_ms = (time.perf_counter() - t_start) * 1e3

    new_state = MpcState(
        lin_states=next_states,
        lin_inputs=next_inputs,
        step_count=state.step_count + 1,
        last_applied=u_applied.copy(),
        planned_states=planned_states.copy(),
        planned_inputs=planned_inputs.copy(),
        last_status=status,
        last_iterations=iterations,
        last_timing=timing,
        filtered_input=filtered,
    )
    return InputVector(u_applied), new_state


@dataclass
class ClosedLoopLog:
    states: np.ndarray  # (T+1, M, n_state) measured
    inputs: np.ndarray  # (T, n_u) applied
    statuses: list[QpStatus]
    iterations: np.ndarray  # (T,)
    timings: np.ndarray  # (T, 4): linearize, condense, solve, total [ms]
    node_errors: np.ndarray  # (T, M): position error vs stage-0 reference
    dt: float

    @property
    def n_steps(self) -> int:
        return self.inputs.shape[0]

    def optimal_fraction(self) -> float:
        return sum(1 for s in self.statuses if s == QpStatus.OPTIMAL) / max(1, len(self.statuses))

    def to_trajectory(self) -> Trajectory:
        return Trajectory(states=self.states, inputs=self.inputs, dt=self.dt)


def run_closed_loop(
    plant_step: Callable[[SystemState, InputVector], SystemState],
    model,
    topo: GraphTopology,
    spec_provider,
    x0: SystemState,
    n_steps: int,
    cfg: MpcConfig,
) -> ClosedLoopLog:
    """Alternate controller and plant for n_steps.

    spec_provider is either a fixed OcpSpec or a callable
    (step_index, MpcState) -> OcpSpec evaluated before each solve, which
    is how time-varying references and obstacle constraints enter.
    """
    n_u_probe = spec_provider(0, None).n_u if callable(spec_provider) else spec_provider.n_u
    state = mpc_init(x0, cfg, n_u_probe)
    M = x0.node_count
    states = np.empty((n_steps + 1, M, x0.array.shape[1]))
    states[0] = x0.array
    inputs = np.empty((n_steps, n_u_probe))
    statuses: list[QpStatus] = []
    iterations = np.zeros(n_steps, dtype=int)
    timings = np.zeros((n_steps, 4))
    node_errors = np.zeros((n_steps, M))

    x = x0
    for t in range(n_steps):
        spec = spec_provider(t, state) if callable(spec_provider) else spec_provider
        u, state = mpc_step(model, topo, spec, x, state, cfg)
        n_p = x.n_p
        ref_pos = spec.x_ref[:, 0, :n_p]
        node_errors[t] = np.linalg.norm(x.positions - ref_pos, axis=1)
        inputs[t] = u.u
        statuses.append(state.last_status)
        iterations[t] = state.last_iterations
        tm = state.last_timing
        timings[t] = (tm.linearize_ms, tm.condense_ms, tm.solve_ms, tm.total_ms)
        x = plant_step(x, u)
        states[t + 1] = x.array
    return ClosedLoopLog(states, inputs, statuses, iterations, timings, node_errors, cfg.dt)


def write_closed_loop_csv(path, log: ClosedLoopLog) -> None:
    n_u = log.inputs.shape[1]
    M = log.node_errors.shape[1]
    header = (
        ["step", "t", "status", "iters", "linearize_ms", "condense_ms", "solve_ms", "total_ms"]
        + [f"u_{i+1}" for i in range(n_u)]
        + [f"err_node_{i+1}" for i in range(M)]
    )
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for k in range(log.n_steps):
            row = [
                str(k),
                "%.17g" % (k * log.dt),
                log.statuses[k].value,
                str(int(log.iterations[k])),
            ]
            row += ["%.17g" % v for v in log.timings[k]]
            row += ["%.17g" % v for v in log.inputs[k]]
            row += ["%.17g" % v for v in log.node_errors[k]]
            f.write(",".join(row) + "\n")
