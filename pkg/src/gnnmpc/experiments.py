"""Experiment machinery shared by the CLI and the test suite: open-loop
evaluation against a persistence baseline, closed-loop tracking and
obstacle avoidance on the chain plant, and the condensing scaling sweep.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .condensing import OcpSpec, StateConstraint, condense_gammas, condense_ocp, stage_input_box
from .gnn import GnnModel, LinearizedDynamics, init_model, rollout
from .graph import GraphTopology, InputVector, SystemState, chain_topology
from .mpc import ClosedLoopLog, MpcConfig, run_closed_loop
from .qpsolver import QpProblem, SolverSettings, solve_qp
from .trunk import ChainConfig, InputSignalConfig, generate_trajectories, settle, step_state_array


def persistence_model(n_p: int, n_u: int, dt: float) -> GnnModel:
    """Constant-velocity predictor: with all weights at zero the learned
    step reduces to v' = v, p' = p + dt*v."""
    rng = np.random.default_rng(0)
    model = init_model(n_p, n_u, dt, rng, n_m=1, psi_hidden=(1,), phi_hidden=(1,))
    for w in model.psi.weights + model.phi.weights:
        w[...] = 0.0
    for b in model.psi.biases + model.phi.biases:
        b[...] = 0.0
    return model


def end_effector_rmse(pred_states: np.ndarray, true_states: np.ndarray) -> float:
    """RMSE of the final node's position over matching trajectories."""
    n_p = pred_states.shape[-1] // 2
    diff = pred_states[1:, -1, :n_p] - true_states[1:, -1, :n_p]
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=-1))))


def eval_openloop(
    model: GnnModel,
    cfg: ChainConfig,
    signal_cfg: InputSignalConfig,
    n_trajectories: int = 100,
    horizon_seconds: float = 1.0,
    seed: int = 1000,
    trajectories=None,
) -> dict:
    """Open-loop prediction error over a fixed horizon on held-out runs.

    Rolls the model and a persistence baseline from each trajectory's
    initial state under the recorded inputs and reports end-effector RMSE.
    Ground-truth trajectories are generated from the plant unless passed
    in explicitly.
    """
    from .gnn import step_array

    topo = chain_topology(cfg.node_count)
    horizon = int(round(horizon_seconds / cfg.dt))
    trajs = trajectories if trajectories is not None else generate_trajectories(
        cfg, signal_cfg, n_trajectories, seconds_each=horizon_seconds, seed=seed
    )
    n_trajectories = len(trajs)
    base = persistence_model(3, cfg.n_u, cfg.dt)
    true_states = np.stack([tr.states[: horizon + 1] for tr in trajs], axis=1)
    U = np.stack([tr.inputs[:horizon] for tr in trajs], axis=1)  # (H, n, n_u)
    preds = {}
    for name, mdl in (("model", model), ("persistence", base)):
        states = np.empty_like(true_states)
        states[0] = true_states[0]
        for k in range(horizon):
            states[k + 1] = step_array(mdl, topo, states[k], U[k])
        preds[name] = states
    diff_m = preds["model"][1:, :, -1, :3] - true_states[1:, :, -1, :3]
    diff_b = preds["persistence"][1:, :, -1, :3] - true_states[1:, :, -1, :3]
    rmse_model = np.sqrt(np.mean(np.sum(diff_m**2, axis=-1), axis=0))
    rmse_base = np.sqrt(np.mean(np.sum(diff_b**2, axis=-1), axis=0))
    return {
        "n_trajectories": n_trajectories,
        "horizon_seconds": horizon_seconds,
        "model_rmse_mean": float(rmse_model.mean()),
        "model_rmse_std": float(rmse_model.std()),
        "persistence_rmse_mean": float(rmse_base.mean()),
        "persistence_rmse_std": float(rmse_base.std()),
        "rmse_ratio": float(rmse_model.mean() / rmse_base.mean()),
    }


@dataclass
class TrackingWeights:
    q_pos: tuple[float, float, float] = (500.0, 500.0, 100.0)
    q_vel: tuple[float, float, float] = (0.5, 0.5, 0.5)
    r_diag: float = 2e-4
    rest_q_pos: float = 0.0  # weight pulling non-target nodes to rest

    def node_block(self, on_target: bool) -> np.ndarray:
        q = np.zeros(6)
        if on_target:
            q[:3] = self.q_pos
            q[3:] = self.q_vel
        else:
            q[:3] = self.rest_q_pos
        return np.diag(q)


def tracking_spec_provider(
    topo: GraphTopology,
    cfg: MpcConfig,
    rest_state: SystemState,
    ee_reference,
    weights: TrackingWeights,
    n_u: int,
    u_max: float,
    target_node: int | None = None,
):
    """Provider for reference tracking: the target node follows the curve,
    the remaining nodes see their rest pose (zero weight by default)."""
    M = topo.node_count
    N = cfg.horizon
    target = M - 1 if target_node is None else target_node
    q = np.zeros((M, N + 1, 6, 6))
    for i in range(M):
        q[i, :] = weights.node_block(i == target)
    r = np.tile(np.eye(n_u) * weights.r_diag, (N, 1, 1))
    u_ref = np.zeros((N, n_u))
    box = stage_input_box(n_u, 0.0, u_max)
    input_cons = [box] * N
    x_base = np.tile(rest_state.array[:, None, :], (1, N + 1, 1))
    stage_offsets = np.arange(N + 1) * cfg.dt

    def provider(t: int, _mpc_state) -> OcpSpec:
        x_ref = x_base.copy()
        pos, vel = ee_reference(t * cfg.dt + stage_offsets)
        x_ref[target, :, :3] = pos
        x_ref[target, :, 3:] = vel
        return OcpSpec(topo, N, q, x_ref, r, u_ref, input_cons, [])

    return provider


@dataclass
class ObstacleScenario:
    """A sphere approaching a target point along a line, holding, then
    retreating. The controller sees half-space constraints supporting the
    sphere, linearized at the predicted node positions."""

    target_point: np.ndarray  # closest-approach position of the sphere center
    approach_from: np.ndarray  # unit direction the obstacle arrives from
    radius: float = 0.05
    margin: float = 0.01  # controller-side inflation of the radius
    start_distance: float = 0.5
    approach_time: float = 4.0
    hold_time: float = 3.0
    retreat_time: float = 4.0
    start_delay: float = 1.0
    constrained_nodes: tuple[int, ...] = ()
    activation_factor: float = 2.5
    rho1: float = 1e3
    rho2: float = 1e4

    def center(self, t):
        """Obstacle center position at time t (vectorized)."""
        t = np.asarray(t, dtype=float)
        d0 = self.start_distance
        t1 = self.start_delay
        t2 = t1 + self.approach_time
        t3 = t2 + self.hold_time
        t4 = t3 + self.retreat_time
        dist = np.where(
            t < t1,
            d0,
            np.where(
                t < t2,
                d0 * (t2 - t) / self.approach_time,
                np.where(t < t3, 0.0, np.where(t < t4, d0 * (t - t3) / self.retreat_time, d0)),
            ),
        )
        return self.target_point + dist[..., None] * self.approach_from

    @property
    def total_time(self) -> float:
        return self.start_delay + self.approach_time + self.hold_time + self.retreat_time


def obstacle_spec_provider(
    topo: GraphTopology,
    cfg: MpcConfig,
    rest_state: SystemState,
    scenario: ObstacleScenario,
    weights: TrackingWeights,
    n_u: int,
    u_max: float,
):
    """Rest-pose regulation plus time-varying avoidance half-spaces.

    Constraint rows are built per constrained node and horizon stage from
    the controller's own predicted positions, only when the prediction is
    within activation range of the sphere.
    """
    M = topo.node_count
    N = cfg.horizon
    q = np.zeros((M, N + 1, 6, 6))
    for i in range(M):
        diag = np.zeros(6)
        diag[:3] = weights.q_pos
        diag[3:] = weights.q_vel
        q[i, :] = np.diag(diag)
    r = np.tile(np.eye(n_u) * weights.r_diag, (N, 1, 1))
    u_ref = np.zeros((N, n_u))
    input_cons = [stage_input_box(n_u, 0.0, u_max)] * N
    x_ref = np.tile(rest_state.array[:, None, :], (1, N + 1, 1))
    r_active = scenario.activation_factor * (scenario.radius + scenario.margin)
    r_con = scenario.radius + scenario.margin
    stage_offsets = np.arange(N + 1) * cfg.dt

    def provider(t: int, mpc_state) -> OcpSpec:
        pred = rest_state.array if mpc_state is None else mpc_state.lin_states
        centers = scenario.center(t * cfg.dt + stage_offsets)  # (N+1, 3)
        cons = []
        for k in range(1, N + 1):
            for node in scenario.constrained_nodes:
                p_hat = pred[min(k, len(pred) - 1), node, :3] if pred.ndim == 3 else pred[node, :3]
                rel = p_hat - centers[k]
                dist = float(np.linalg.norm(rel))
                if dist > r_active:
                    continue
                n_hat = rel / max(dist, 1e-9)
                row = np.zeros((1, 6))
                row[0, :3] = -n_hat
                bound = np.array([-r_con - float(n_hat @ centers[k])])
                cons.append(
                    StateConstraint(node, k, row, bound, soft=True,
                                    rho1=scenario.rho1, rho2=scenario.rho2)
                )
        return OcpSpec(topo, N, q, x_ref, r, u_ref, input_cons, cons)

    return provider


def plant_linearizer(cfg: ChainConfig, topo: GraphTopology, eps: float = 1e-5):
    """Exact-plant alternative to the learned model: central finite
    differences of the one-period plant map, truncated to the chain's
    neighborhood structure (couplings beyond one hop over a single period
    are negligible and dropped; the offset keeps the model exact at the
    linearization point)."""
    M = cfg.node_count
    nx, n_u = 6, cfg.n_u
    edges = topo.edges
    P = M * nx

    def lin_fn(states: np.ndarray, inputs: np.ndarray) -> LinearizedDynamics:
        K = inputs.shape[0]
        base_u = np.clip(inputs, 0.0, cfg.u_max)
        # one batch over every stage and every central-difference column:
        # state columns, then input columns, then the nominal point itself
        n_pert = 2 * P + 2 * n_u + 1
        Xb = np.repeat(states[:, None], n_pert, axis=1)  # (K, n_pert, M, nx)
        flat = Xb.reshape(K, n_pert, P)
        cols = np.arange(P)
        flat[:, cols, cols] += eps
        flat[:, P + cols, cols] -= eps
        Ub = np.repeat(base_u[:, None], n_pert, axis=1)
        ucols = np.arange(n_u)
        Ub[:, 2 * P + ucols, ucols] += eps
        Ub[:, 2 * P + n_u + ucols, ucols] -= eps
        # differentiate the unclipped map: the input box is the QP's job,
        # and one-sided derivatives at active bounds would skew the model
        f_all = step_state_array(cfg, Xb.reshape(-1, M, nx), Ub.reshape(-1, n_u), clip_inputs=False)
        f_all = f_all.reshape(K, n_pert, M, nx)
        A_full = (f_all[:, :P] - f_all[:, P : 2 * P]).reshape(K, P, P).transpose(0, 2, 1) / (2 * eps)
        B_full = (
            f_all[:, 2 * P : 2 * P + n_u] - f_all[:, 2 * P + n_u : 2 * P + 2 * n_u]
        ).reshape(K, n_u, P).transpose(0, 2, 1) / (2 * eps)
        f0 = f_all[:, -1]

        A_blocks = A_full.reshape(K, M, nx, M, nx)
        a_self = np.ascontiguousarray(A_blocks[:, np.arange(M), :, np.arange(M), :].transpose(1, 0, 2, 3))
        a_nbr = np.empty((K, len(edges), nx, nx))
        for e, (di, sj) in enumerate(edges):
            a_nbr[:, e] = A_blocks[:, di, :, sj, :]
        b = B_full.reshape(K, M, nx, n_u)

        c = f0 - (a_self @ states[..., None])[..., 0] - (b @ base_u[:, None, :, None])[..., 0]
        for e, (di, sj) in enumerate(edges):
            c[:, di] -= (a_nbr[:, e] @ states[:, sj, :, None])[..., 0]
        return LinearizedDynamics(topo, K, a_self, a_nbr, b, c)

    return lin_fn


def make_plant_step(cfg: ChainConfig):
    def plant_step(x: SystemState, u: InputVector) -> SystemState:
        return SystemState(step_state_array(cfg, x.array, u.u))

    return plant_step


def calibrate_reference_center(cfg: ChainConfig, radius: float, settle_s: float = 4.0) -> np.ndarray:
    """Center of a horizontal end-effector circle of the given radius that
    lies in the reachable workspace.

    Bending an inextensible chain sideways necessarily raises its tip, so
    a circle drawn at the rest height cannot be tracked. Pull the plant
    sideways until the tip sits at the requested radius and read off the
    height it actually reaches; by symmetry that height is valid all the
    way around the circle.
    """
    x_rest = settle(cfg, settle_s)
    axis_xy = x_rest.positions[-1, :2]

    def tip_at(pull: float):
        u = np.zeros(cfg.n_u)
        u[0] = pull
        s = settle(cfg, settle_s, u=u)
        dxy = float(np.linalg.norm(s.positions[-1, :2] - axis_xy))
        return dxy, float(s.positions[-1, 2])

    lo, hi = 0.0, 1.0
    d_hi, _ = tip_at(hi)
    while d_hi < radius and hi < cfg.u_max:
        hi = min(2 * hi, cfg.u_max)
        d_hi, _ = tip_at(hi)
    z = x_rest.positions[-1, 2]
    for _ in range(12):
        mid = 0.5 * (lo + hi)
        d, z = tip_at(mid)
        if abs(d - radius) < 1e-5:
            break
        if d < radius:
            lo = mid
        else:
            hi = mid
    return np.array([axis_xy[0], axis_xy[1], z])


@dataclass
class TrackingResult:
    log: ClosedLoopLog
    ee_rmse: float
    node_rmse: np.ndarray
    mean_solve_ms: float
    mean_total_ms: float
    optimal_fraction: float


def run_tracking(
    plant_cfg: ChainConfig,
    model,
    mpc_cfg: MpcConfig,
    ee_reference,
    duration_s: float,
    weights: TrackingWeights | None = None,
    settle_s: float = 3.0,
    skip_s: float = 2.0,
) -> TrackingResult:
    """Closed-loop reference tracking; RMSE excludes the initial transient
    (first skip_s seconds)."""
    topo = chain_topology(plant_cfg.node_count)
    weights = weights or TrackingWeights()
    x0 = settle(plant_cfg, settle_s)
    provider = tracking_spec_provider(
        topo, mpc_cfg, x0, ee_reference, weights, plant_cfg.n_u, plant_cfg.u_max
    )
    n_steps = int(round(duration_s / mpc_cfg.dt))
    log = run_closed_loop(
        make_plant_step(plant_cfg), model, topo, provider, x0, n_steps, mpc_cfg
    )
    skip = int(round(skip_s / mpc_cfg.dt))
    errs = log.node_errors[skip:]
    node_rmse = np.sqrt(np.mean(errs * errs, axis=0))
    return TrackingResult(
        log=log,
        ee_rmse=float(node_rmse[-1]),
        node_rmse=node_rmse,
        mean_solve_ms=float(log.timings[:, 2].mean()),
        mean_total_ms=float(log.timings[:, 3].mean()),
        optimal_fraction=log.optimal_fraction(),
    )


@dataclass
class ObstacleResult:
    log: ClosedLoopLog
    min_distance: float  # over constrained nodes and steps
    penetration: float  # max(0, radius - min_distance)
    peak_ee_deviation: float
    final_ee_deviation: float
    mean_solve_ms: float
    optimal_fraction: float
    distances: np.ndarray  # (T, n_constrained)


def run_obstacle(
    plant_cfg: ChainConfig,
    model,
    mpc_cfg: MpcConfig,
    scenario: ObstacleScenario,
    weights: TrackingWeights | None = None,
    settle_s: float = 3.0,
    extra_s: float = 2.0,
) -> ObstacleResult:
    """Full-body avoidance run; the plant has no contact physics, so any
    penetration is purely a controller failure."""
    topo = chain_topology(plant_cfg.node_count)
    weights = weights or TrackingWeights(
        q_pos=(300.0, 300.0, 300.0), q_vel=(0.5, 0.5, 0.5), r_diag=2e-4
    )
    x0 = settle(plant_cfg, settle_s)
    provider = obstacle_spec_provider(
        topo, mpc_cfg, x0, scenario, weights, plant_cfg.n_u, plant_cfg.u_max
    )
    n_steps = int(round((scenario.total_time + extra_s) / mpc_cfg.dt))
    log = run_closed_loop(
        make_plant_step(plant_cfg), model, topo, provider, x0, n_steps, mpc_cfg
    )
    t_grid = np.arange(n_steps) * mpc_cfg.dt
    centers = scenario.center(t_grid)  # (T, 3)
    nodes = list(scenario.constrained_nodes)
    rel = log.states[:-1][:, nodes, :3] - centers[:, None, :]
    distances = np.linalg.norm(rel, axis=-1)
    min_distance = float(distances.min())
    ee_dev = np.linalg.norm(log.states[:, -1, :3] - x0.positions[-1], axis=-1)
    return ObstacleResult(
        log=log,
        min_distance=min_distance,
        penetration=max(0.0, scenario.radius - min_distance),
        peak_ee_deviation=float(ee_dev.max()),
        final_ee_deviation=float(ee_dev[-1]),
        mean_solve_ms=float(log.timings[:, 2].mean()),
        optimal_fraction=log.optimal_fraction(),
        distances=distances,
    )


def default_obstacle_scenario(plant_cfg: ChainConfig, which: str, x_rest: SystemState | None = None) -> ObstacleScenario:
    """The two canonical runs: sphere approaching the middle node or the
    end effector, arriving horizontally and retreating the same way."""
    x_rest = x_rest if x_rest is not None else settle(plant_cfg, 3.0)
    M = plant_cfg.node_count
    if which == "middle":
        node = max(1, (M - 1) // 2 + 1)
    elif which == "end-effector":
        node = M - 1
    else:
        raise ValueError("scenario must be 'middle' or 'end-effector'")
    target = x_rest.positions[node].copy()
    moving = tuple(range(1, M))
    return ObstacleScenario(
        target_point=target,
        approach_from=np.array([1.0, 0.0, 0.0]),
        constrained_nodes=moving,
    )


@dataclass
class ScalingRow:
    node_count: int
    linearize_ms: float
    condense_ms: float
    solve_ms: float
    condense_peak_mb: float


def _scaling_problem(M: int, N: int, dt: float, seed: int):
    """Synthetic chain instance at the desk-model size: random weights are
    fine for timing since the flop count does not depend on the values."""
    rng = np.random.default_rng(seed)
    topo = chain_topology(M)
    model = init_model(3, 6, dt, rng, n_m=16, psi_hidden=(32, 32), phi_hidden=(64, 64),
                       out_scale=0.05)
    states = np.zeros((N, M, 6))
    states[:, :, 2] = -0.15 * np.arange(M)
    states += 0.01 * rng.standard_normal(states.shape)
    inputs = rng.uniform(0.0, 4.0, size=(N, 6))
    q = np.zeros((M, N + 1, 6, 6))
    diag = np.concatenate([np.full(3, 1.0), np.full(3, 0.1)])
    q[:, :] = np.diag(diag)
    x_ref = states[0][:, None, :].repeat(N + 1, axis=1)
    r = np.tile(np.eye(6) * 1e-2, (N, 1, 1))
    u_ref = np.zeros((N, 6))
    cons = [stage_input_box(6, 0.0, 8.0)] * N
    scons = []
    row = np.zeros((1, 6))
    row[0, 2] = 1.0  # end-effector height bound, one per stage
    for k in range(1, N + 1):
        scons.append(StateConstraint(M - 1, k, row, np.array([1.0]), soft=True))
    spec = OcpSpec(topo, N, q, x_ref, r, u_ref, cons, scons)
    return topo, model, states, inputs, spec


def _blas_single_thread():
    """Pin BLAS pools to one thread for clean single-thread timings;
    harmless no-op context if threadpoolctl is unavailable."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover
        import contextlib

        return contextlib.nullcontext()


def run_scaling_sweep(
    m_list,
    horizon: int = 20,
    dt: float = 0.01,
    reps: int = 3,
    threads: int = 1,
    seed: int = 0,
    solve: bool = True,
) -> list[ScalingRow]:
    """Condensing wall time and peak memory versus node count.

    Timed repetitions run after a warm-up pass; peak memory is sampled in
    a separate untimed pass because allocation tracing distorts timing.
    Single-threaded runs also pin the BLAS pool to one thread so the
    measured slope reflects the algorithm and not pool scheduling.
    """
    from .condensing import expand_soft_constraints
    from .gnn import linearize_trajectory

    limiter = _blas_single_thread() if threads == 1 else None
    rows = []
    try:
        if limiter is not None:
            limiter.__enter__()
        for M in m_list:
            topo, model, states, inputs, spec = _scaling_problem(int(M), horizon, dt, seed)
            x0 = states[0]

            lin = linearize_trajectory(model, topo, states, inputs)  # warm-up
            gammas = condense_gammas(lin, x0, threads=threads)
            qp = condense_ocp(spec, lin, x0, threads=threads, gammas=gammas)

            tracemalloc.start()
            g2 = condense_gammas(lin, x0, threads=threads)
            condense_ocp(spec, lin, x0, threads=threads, gammas=g2)
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            del g2

            lin_t, cond_t, solve_t = [], [], []
            for _ in range(reps):
                t0 = time.perf_counter()
                lin = linearize_trajectory(model, topo, states, inputs)
                lin_t.append(time.perf_counter() - t0)

                t0 = time.perf_counter()
                gammas = condense_gammas(lin, x0, threads=threads)
                qp = condense_ocp(spec, lin, x0, threads=threads, gammas=gammas)
                cond_t.append(time.perf_counter() - t0)

                if solve:
                    h, g, c, d, _ = expand_soft_constraints(qp)
                    t0 = time.perf_counter()
                    solve_qp(QpProblem(h, g, c, d), SolverSettings(tolerance=1e-8))
                    solve_t.append(time.perf_counter() - t0)
            rows.append(
                ScalingRow(
                    node_count=int(M),
                    linearize_ms=float(np.median(lin_t) * 1e3),
                    condense_ms=float(np.median(cond_t) * 1e3),
                    solve_ms=float(np.median(solve_t) * 1e3) if solve_t else 0.0,
                    condense_peak_mb=float(peak / 1e6),
                )
            )
    finally:
        if limiter is not None:
            limiter.__exit__(None, None, None)
    return rows


def loglog_slope(x, y) -> float:
    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0])
