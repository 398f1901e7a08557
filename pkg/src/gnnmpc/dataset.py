"""Transition datasets for dynamics learning.

A dataset is a bag of (x_t, u_t, x_{t+1}) records harvested from sampled
trajectories, split 90/10 into train/validation by whole trajectory so that
temporally adjacent records never straddle the split. Normalization
statistics are computed on the training split only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Trajectory, read_trajectory_csv, write_trajectory_csv

_STD_FLOOR = 1e-8


@dataclass
class DatasetStats:
    """Per-feature z-score statistics (state/input) and the scale of the
    per-step velocity increment (the regression target)."""

    state_mean: np.ndarray  # (n_state,)
    state_scale: np.ndarray
    input_mean: np.ndarray  # (n_u,)
    input_scale: np.ndarray
    target_mean: np.ndarray  # (n_p,)
    target_scale: np.ndarray


def _safe_scale(std: np.ndarray) -> np.ndarray:
    std = np.asarray(std, dtype=float)
    return np.where(std > _STD_FLOOR, std, 1.0)


@dataclass
class Dataset:
    """Stacked transition records plus trajectory bookkeeping."""

    x: np.ndarray  # (R, M, n_state)
    u: np.ndarray  # (R, n_u)
    x_next: np.ndarray  # (R, M, n_state)
    dt: float
    traj_id: np.ndarray  # (R,)
    train_traj: np.ndarray  # sorted trajectory ids in the training split
    val_traj: np.ndarray
    stats: DatasetStats = field(init=False)

    def __post_init__(self):
        if self.x.shape[0] == 0:
            raise ValueError("dataset must contain at least one record")
        if not (self.x.shape == self.x_next.shape and self.x.shape[0] == self.u.shape[0]):
            raise ValueError("record arrays disagree on length/shape")
        self.stats = self._compute_stats()

    def _compute_stats(self) -> DatasetStats:
        mask = self.train_mask
        if not mask.any():
            mask = np.ones(len(self.x), dtype=bool)
        X = self.x[mask]
        n_p = X.shape[2] // 2
        flat = X.reshape(-1, X.shape[2])
        dv = (self.x_next[mask, :, n_p:] - self.x[mask, :, n_p:]).reshape(-1, n_p)
        return DatasetStats(
            state_mean=flat.mean(axis=0),
            state_scale=_safe_scale(flat.std(axis=0)),
            input_mean=self.u[mask].mean(axis=0),
            input_scale=_safe_scale(self.u[mask].std(axis=0)),
            target_mean=dv.mean(axis=0),
            target_scale=_safe_scale(dv.std(axis=0)),
        )

    @property
    def n_records(self) -> int:
        return self.x.shape[0]

    @property
    def node_count(self) -> int:
        return self.x.shape[1]

    @property
    def train_mask(self) -> np.ndarray:
        return np.isin(self.traj_id, self.train_traj)

    @property
    def val_mask(self) -> np.ndarray:
        return np.isin(self.traj_id, self.val_traj)

    @classmethod
    def from_trajectories(
        cls,
        trajectories: list[Trajectory],
        val_fraction: float = 0.1,
        seed: int = 0,
    ) -> "Dataset":
        if not trajectories:
            raise ValueError("need at least one trajectory")
        dt = trajectories[0].dt
        xs, us, xns, tids = [], [], [], []
        for tid, tr in enumerate(trajectories):
            if abs(tr.dt - dt) > 1e-12:
                raise ValueError("all trajectories must share the sampling period")
            xs.append(tr.states[:-1])
            xns.append(tr.states[1:])
            us.append(tr.inputs)
            tids.append(np.full(tr.n_steps, tid))
        n = len(trajectories)
        order = np.random.default_rng(seed).permutation(n)
        n_val = int(round(val_fraction * n))
        if n >= 2 and val_fraction > 0:
            n_val = max(1, min(n_val, n - 1))
        else:
            n_val = 0
        val = np.sort(order[:n_val])
        train = np.sort(order[n_val:])
        return cls(
            x=np.concatenate(xs),
            u=np.concatenate(us),
            x_next=np.concatenate(xns),
            dt=dt,
            traj_id=np.concatenate(tids),
            train_traj=train,
            val_traj=val,
        )


def save_dataset(out_dir, trajectories: list[Trajectory], dataset: Dataset) -> None:
    """Write trajectory CSVs plus a manifest with the split assignment."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for tid, tr in enumerate(trajectories):
        name = f"traj_{tid:04d}.csv"
        write_trajectory_csv(out / name, tr)
        split = "val" if tid in dataset.val_traj else "train"
        files.append({"file": name, "split": split})
    manifest = {
        "dt": dataset.dt,
        "node_count": dataset.node_count,
        "files": files,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(data_dir) -> Dataset:
    data = Path(data_dir)
    with open(data / "manifest.json") as f:
        manifest = json.load(f)
    node_count = int(manifest["node_count"])
    xs, us, xns, tids = [], [], [], []
    train, val = [], []
    for tid, entry in enumerate(manifest["files"]):
        tr = read_trajectory_csv(data / entry["file"], node_count)
        xs.append(tr.states[:-1])
        xns.append(tr.states[1:])
        us.append(tr.inputs)
        tids.append(np.full(tr.n_steps, tid))
        (val if entry["split"] == "val" else train).append(tid)
    return Dataset(
        x=np.concatenate(xs),
        u=np.concatenate(us),
        x_next=np.concatenate(xns),
        dt=float(manifest["dt"]),
        traj_id=np.concatenate(tids),
        train_traj=np.array(sorted(train), dtype=int),
        val_traj=np.array(sorted(val), dtype=int),
    )
