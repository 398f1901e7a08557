"""trunkctl: experiment harness over the chain plant.

Subcommands: generate, train, eval-openloop, track, obstacle, scaling.
Each takes a JSON config plus --seed/--out/--threads overrides, writes
plot-ready CSV artifacts and a machine-readable summary.json carrying the
config hash, the seed and every headline metric. Exit codes: 0 success,
2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .condensing import ConfigurationError
from .dataset import Dataset, load_dataset, save_dataset
from .gnn import load_model, save_model
from .graph import chain_topology
from .mpc import MpcConfig, write_closed_loop_csv
from .qpsolver import SolverSettings
from .references import circle_reference, figure_eight_reference, file_reference
from .training import TrainConfig, TrainingDiverged, model_for_dataset, train
from .trunk import ChainConfig, InputSignalConfig, generate_trajectories, save_chain_config, settle


def _config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _write_summary(out: Path, command: str, cfg: dict, seed: int, metrics: dict, artifacts: list[str]):
    summary = {
        "command": command,
        "config_hash": _config_hash(cfg),
        "seed": seed,
        "metrics": metrics,
        "artifacts": artifacts,
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=1)
    print(json.dumps(summary["metrics"], indent=1))


def _plant_from_config(cfg: dict) -> ChainConfig:
    plant = cfg.get("plant", {})
    if isinstance(plant, str):
        with open(plant) as f:
            plant = json.load(f)
    return ChainConfig.from_dict(plant)


def _signal_from_config(cfg: dict, u_max: float) -> InputSignalConfig:
    sig = dict(cfg.get("signal", {}))
    sig.setdefault("u_max", u_max)
    for key in ("amplitude_range", "period_range", "sinusoids_range"):
        if key in sig:
            sig[key] = tuple(sig[key])
    return InputSignalConfig(**sig)


def _mpc_from_config(cfg: dict, dt: float, threads: int) -> MpcConfig:
    m = dict(cfg.get("mpc", {}))
    solver = SolverSettings(
        tolerance=m.pop("solver_tolerance", 1e-8),
        max_iterations=m.pop("solver_max_iterations", 50),
    )
    return MpcConfig(
        horizon=m.pop("horizon", 20),
        dt=dt,
        solver=solver,
        warm_start=m.pop("warm_start", True),
        fallback=m.pop("fallback", "hold-previous-input"),
        sqp_iterations=m.pop("sqp_iterations", 1),
        threads=threads,
        input_filter_tau=m.pop("input_filter_tau", None),
    )


def _weights_from_config(cfg: dict):
    from .experiments import TrackingWeights

    w = cfg.get("weights")
    if w is None:
        return None
    return TrackingWeights(
        q_pos=tuple(w.get("q_pos", (500.0, 500.0, 100.0))),
        q_vel=tuple(w.get("q_vel", (0.5, 0.5, 0.5))),
        r_diag=w.get("r_diag", 2e-4),
    )


def _model_or_plant(cfg: dict, plant: ChainConfig):
    path = cfg.get("model_path", "true-plant")
    if path == "true-plant":
        from .experiments import plant_linearizer

        topo = chain_topology(plant.node_count)
        return plant_linearizer(plant, topo), "true-plant"
    model = load_model(path)
    if abs(model.dt - plant.dt) > 1e-12:
        raise ConfigurationError(
            f"model sampling period {model.dt} does not match plant dt {plant.dt}"
        )
    return model, path


def cmd_generate(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    plant = _plant_from_config(cfg)
    signal = _signal_from_config(cfg, plant.u_max)
    n_traj = int(cfg.get("n_trajectories", 50))
    seconds = float(cfg.get("seconds_each", 20.0))
    trajs = generate_trajectories(plant, signal, n_traj, seconds, seed=seed)
    dataset = Dataset.from_trajectories(
        trajs, val_fraction=float(cfg.get("val_fraction", 0.1)), seed=seed
    )
    save_dataset(out, trajs, dataset)
    save_chain_config(out / "plant.json", plant)
    return {
        "n_trajectories": n_traj,
        "seconds_each": seconds,
        "n_records": dataset.n_records,
        "n_train_trajectories": int(len(dataset.train_traj)),
        "n_val_trajectories": int(len(dataset.val_traj)),
    }


def cmd_train(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    dataset = load_dataset(cfg["data_dir"])
    mdl_cfg = cfg.get("model", {})
    tr_cfg = dict(cfg.get("train", {}))
    tr_cfg.setdefault("rng_seed", seed)
    config = TrainConfig(**tr_cfg)
    topo = chain_topology(dataset.node_count)
    model = model_for_dataset(
        dataset,
        np.random.default_rng(seed),
        n_m=int(mdl_cfg.get("n_m", 16)),
        psi_hidden=tuple(mdl_cfg.get("psi_hidden", (32, 32))),
        phi_hidden=tuple(mdl_cfg.get("phi_hidden", (64, 64))),
    )
    model, history = train(model, topo, dataset, config)
    save_model(model, out / "model.json")
    with open(out / "history.csv", "w") as f:
        f.write("epoch,train_loss,val_loss,lr\n")
        for h in history:
            f.write(f"{h.epoch},{h.train_loss:.17g},{h.val_loss:.17g},{h.lr:.17g}\n")
    return {
        "epochs": len(history),
        "final_train_loss": history[-1].train_loss,
        "best_val_loss": min(h.val_loss for h in history),
    }


def cmd_eval_openloop(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    from .experiments import eval_openloop

    plant = _plant_from_config(cfg)
    signal = _signal_from_config(cfg, plant.u_max)
    model = load_model(cfg["model_path"])
    res = eval_openloop(
        model,
        plant,
        signal,
        n_trajectories=int(cfg.get("n_trajectories", 100)),
        horizon_seconds=float(cfg.get("horizon_seconds", 1.0)),
        seed=seed,
    )
    with open(out / "openloop.csv", "w") as f:
        f.write("metric,value\n")
        for k, v in res.items():
            f.write(f"{k},{v}\n")
    return res


def _make_reference(cfg: dict, plant: ChainConfig):
    from .experiments import calibrate_reference_center

    ref = cfg.get("reference", {"kind": "circle"})
    kind = ref.get("kind", "circle")
    if kind == "circle":
        radius = float(ref.get("radius", 0.04))
        period = float(ref.get("period", 8.0))
        center = ref.get("center") or calibrate_reference_center(plant, radius)
        return circle_reference(radius, period, np.asarray(center, dtype=float)), radius
    if kind == "figure-eight":
        lobe = float(ref.get("lobe", 0.04))
        period = float(ref.get("period", 10.0))
        center = ref.get("center") or calibrate_reference_center(plant, lobe)
        return figure_eight_reference(lobe, period, np.asarray(center, dtype=float)), lobe
    if kind == "file":
        return file_reference(ref["path"]), float(ref.get("scale", 0.04))
    raise ConfigurationError(f"unknown reference kind {kind!r}")


def cmd_track(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    from .experiments import run_tracking

    plant = _plant_from_config(cfg)
    model, model_name = _model_or_plant(cfg, plant)
    mpc_cfg = _mpc_from_config(cfg, plant.dt, threads)
    reference, scale = _make_reference(cfg, plant)
    res = run_tracking(
        plant,
        model,
        mpc_cfg,
        reference,
        duration_s=float(cfg.get("duration_s", 20.0)),
        weights=_weights_from_config(cfg),
    )
    write_closed_loop_csv(out / "closed_loop.csv", res.log)
    from .graph import write_trajectory_csv

    write_trajectory_csv(out / "measured.csv", res.log.to_trajectory())
    return {
        "model": model_name,
        "ee_rmse_m": res.ee_rmse,
        "ee_rmse_fraction_of_reference": res.ee_rmse / scale,
        "node_rmse_m": res.node_rmse.tolist(),
        "mean_solve_ms": res.mean_solve_ms,
        "mean_step_ms": res.mean_total_ms,
        "optimal_fraction": res.optimal_fraction,
    }


def cmd_obstacle(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    from .experiments import ObstacleScenario, default_obstacle_scenario, run_obstacle

    plant = _plant_from_config(cfg)
    model, model_name = _model_or_plant(cfg, plant)
    mpc_cfg = _mpc_from_config(cfg, plant.dt, threads)
    sc_cfg = dict(cfg.get("scenario", {}))
    which = sc_cfg.pop("target", "middle")
    scenario = default_obstacle_scenario(plant, which)
    for key, val in sc_cfg.items():
        if not hasattr(scenario, key):
            raise ConfigurationError(f"unknown scenario field {key!r}")
        setattr(scenario, key, val)
    res = run_obstacle(plant, model, mpc_cfg, scenario, weights=_weights_from_config(cfg))
    write_closed_loop_csv(out / "closed_loop.csv", res.log)
    with open(out / "distances.csv", "w") as f:
        nodes = scenario.constrained_nodes
        f.write("step," + ",".join(f"dist_node_{i+1}" for i in nodes) + "\n")
        for k, row in enumerate(res.distances):
            f.write(str(k) + "," + ",".join("%.17g" % v for v in row) + "\n")
    return {
        "model": model_name,
        "scenario": which,
        "obstacle_radius_m": scenario.radius,
        "min_distance_m": res.min_distance,
        "penetration_m": res.penetration,
        "peak_ee_deviation_m": res.peak_ee_deviation,
        "final_ee_deviation_m": res.final_ee_deviation,
        "mean_solve_ms": res.mean_solve_ms,
        "optimal_fraction": res.optimal_fraction,
    }


def cmd_scaling(cfg: dict, out: Path, seed: int, threads: int) -> dict:
    from .experiments import loglog_slope, run_scaling_sweep

    m_list = cfg.get("m_list", [16, 32, 64, 128, 256, 512, 1024])
    reps = int(cfg.get("reps", 3))
    horizon = int(cfg.get("horizon", 20))
    rows_single = run_scaling_sweep(m_list, horizon=horizon, reps=reps, threads=1, seed=seed)
    rows_multi = (
        run_scaling_sweep(m_list, horizon=horizon, reps=reps, threads=threads, seed=seed)
        if threads > 1
        else None
    )
    with open(out / "scaling.csv", "w") as f:
        f.write("node_count,threads,linearize_ms,condense_ms,solve_ms,condense_peak_mb\n")
        for rows, th in ((rows_single, 1), (rows_multi, threads)):
            if rows is None:
                continue
            for r in rows:
                f.write(
                    f"{r.node_count},{th},{r.linearize_ms:.6g},{r.condense_ms:.6g},"
                    f"{r.solve_ms:.6g},{r.condense_peak_mb:.6g}\n"
                )
    ms = [r.node_count for r in rows_single]
    metrics = {
        "m_list": list(map(int, m_list)),
        "condense_ms_single": [r.condense_ms for r in rows_single],
        "condense_time_slope_single": loglog_slope(ms, [r.condense_ms for r in rows_single]),
        "condense_memory_slope": loglog_slope(ms, [r.condense_peak_mb for r in rows_single]),
        "linearize_ms_single": [r.linearize_ms for r in rows_single],
        "solve_ms_single": [r.solve_ms for r in rows_single],
    }
    if rows_multi is not None:
        metrics["condense_ms_multi"] = [r.condense_ms for r in rows_multi]
        metrics["condense_time_slope_multi"] = loglog_slope(
            ms, [r.condense_ms for r in rows_multi]
        )
    return metrics


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval-openloop": cmd_eval_openloop,
    "track": cmd_track,
    "obstacle": cmd_obstacle,
    "scaling": cmd_scaling,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="trunkctl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=False, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        cfg = {}
        if args.config:
            with open(args.config) as f:
                cfg = json.load(f)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out = Path(args.out or f"out-{args.command}")
        out.mkdir(parents=True, exist_ok=True)
        metrics = _COMMANDS[args.command](cfg, out, seed, max(1, args.threads))
    except (ConfigurationError, ValueError, KeyError, TypeError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    _write_summary(out, args.command, cfg, seed, metrics, sorted(p.name for p in out.iterdir()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
