"""Reference curves for the end effector.

Each factory returns a vectorized callable t -> (position, velocity) with
analytic time derivatives; positions are 3-D points in the plant frame.
"""

from __future__ import annotations

import numpy as np


def circle_reference(radius: float, period: float, center) -> callable:
    """Circle in the x-y plane, starting at angle 0 with tangential speed
    2*pi*radius/period."""
    center = np.asarray(center, dtype=float)
    omega = 2.0 * np.pi / period

    def ref(t):
        t = np.asarray(t, dtype=float)
        ang = omega * t
        pos = np.stack(
            [radius * np.cos(ang), radius * np.sin(ang), np.zeros_like(ang)], axis=-1
        ) + center
        vel = np.stack(
            [-radius * omega * np.sin(ang), radius * omega * np.cos(ang), np.zeros_like(ang)],
            axis=-1,
        )
        return pos, vel

    return ref


def figure_eight_reference(lobe: float, period: float, center) -> callable:
    """Gerono lemniscate x = a sin(s), y = a sin(s) cos(s); crosses its
    center twice per period."""
    center = np.asarray(center, dtype=float)
    omega = 2.0 * np.pi / period

    def ref(t):
        t = np.asarray(t, dtype=float)
        s = omega * t
        sin, cos = np.sin(s), np.cos(s)
        pos = np.stack([lobe * sin, lobe * sin * cos, np.zeros_like(s)], axis=-1) + center
        vel = np.stack(
            [lobe * omega * cos, lobe * omega * (cos * cos - sin * sin), np.zeros_like(s)],
            axis=-1,
        )
        return pos, vel

    return ref


def constant_reference(point) -> callable:
    point = np.asarray(point, dtype=float)

    def ref(t):
        t = np.asarray(t, dtype=float)
        pos = np.broadcast_to(point, t.shape + (3,)).copy()
        vel = np.zeros(t.shape + (3,))
        return pos, vel

    return ref


def file_reference(path) -> callable:
    """Reference from a CSV with columns t,x,y,z[,vx,vy,vz].

    Positions are interpolated linearly; beyond the last sample the final
    value is held (velocity zero there). Missing velocity columns fall
    back to finite differences of the positions.
    """
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    if rows.ndim == 1:
        rows = rows[None]
    t_grid = rows[:, 0]
    pos_grid = rows[:, 1:4]
    if rows.shape[1] >= 7:
        vel_grid = rows[:, 4:7]
    else:
        vel_grid = np.gradient(pos_grid, t_grid, axis=0)

    def ref(t):
        t = np.asarray(t, dtype=float)
        tc = np.clip(t, t_grid[0], t_grid[-1])
        pos = np.stack([np.interp(tc, t_grid, pos_grid[:, i]) for i in range(3)], axis=-1)
        vel = np.stack([np.interp(tc, t_grid, vel_grid[:, i]) for i in range(3)], axis=-1)
        vel = np.where((t >= t_grid[-1])[..., None], 0.0, vel)
        return pos, vel

    return ref
