"""Dense primal-dual interior-point solver for strictly convex QPs.

Solves min_u u'Hu + g'u subject to C u <= d with a Mehrotra-style
predictor-corrector on the perturbed KKT system

    2Hu + g + C'lambda = 0,   Cu + s = d,   lambda_i s_i = mu,  lambda, s > 0.

Each iteration factorizes the Schur complement 2H + C' diag(lambda/s) C
once (Cholesky, with escalating static regularization on breakdown) and
reuses it for the affine and corrector steps. Rows of C with a single
nonzero entry (box bounds, slack nonnegativity) contribute to the Schur
matrix diagonally and are accumulated without a matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg as sla


class QpStatus(Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class QpProblem:
    h: np.ndarray  # (n, n) symmetric PD
    g: np.ndarray  # (n,)
    c: np.ndarray  # (m, n), m may be 0
    d: np.ndarray  # (m,)

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        n = self.g.shape[0]
        if self.h.shape != (n, n):
            raise ValueError("H must be square and match g")
        if float(np.max(np.abs(self.h - self.h.T))) > 1e-12 * max(1.0, float(np.max(np.abs(self.h)))):
            raise ValueError("H must be symmetric")
        if self.c is None:
            self.c = np.zeros((0, n))
            self.d = np.zeros(0)
        self.c = np.atleast_2d(np.asarray(self.c, dtype=float)) if self.c.size else np.zeros((0, n))
        self.d = np.asarray(self.d, dtype=float).reshape(-1)
        if self.c.shape != (self.d.shape[0], n):
            raise ValueError("C/d shape mismatch")

    @property
    def n(self) -> int:
        return self.g.shape[0]

    @property
    def m(self) -> int:
        return self.d.shape[0]

    def objective(self, u: np.ndarray) -> float:
        return float(u @ self.h @ u + self.g @ u)


@dataclass
class SolverSettings:
    tolerance: float = 1e-8
    max_iterations: int = 50
    regularization: float = 1e-9
    fraction_to_boundary: float = 0.995
    warm_start: np.ndarray | None = None

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class QpSolution:
    u: np.ndarray
    duals: np.ndarray
    status: QpStatus
    iterations: int
    stationarity: float
    primal_infeas: float
    complementarity: float


def _residuals(p: QpProblem, u, lam):
    r_stat = float(np.max(np.abs(2.0 * p.h @ u + p.g + p.c.T @ lam))) if p.m else float(
        np.max(np.abs(2.0 * p.h @ u + p.g))
    )
    viol = p.c @ u - p.d if p.m else np.zeros(0)
    r_prim = float(max(0.0, np.max(viol))) if p.m else 0.0
    r_comp = float(np.max(np.abs(lam * viol))) if p.m else 0.0
    return r_stat, r_prim, r_comp


def _split_single_nonzero_rows(C: np.ndarray):
    """Indices of rows with exactly one nonzero (their Schur contribution is
    diagonal) and the remaining general rows."""
    nz = C != 0.0
    counts = nz.sum(axis=1)
    single = np.flatnonzero(counts == 1)
    general = np.flatnonzero(counts != 1)
    cols = nz[single].argmax(axis=1) if single.size else np.zeros(0, dtype=np.intp)
    vals = C[single, cols] if single.size else np.zeros(0)
    return single, cols, vals, general


def solve_qp(problem: QpProblem, settings: SolverSettings | None = None) -> QpSolution:
    """Predictor-corrector interior point iteration; deterministic.

    Returns the best iterate found when the iteration cap is reached.
    """
    s = settings or SolverSettings()
    p = problem
    n, m = p.n, p.m
    tol = s.tolerance
    # Internal stopping references: for problems scaled far below unit size
    # the absolute bounds are tightened proportionally, so the argmin stays
    # scale invariant; never looser than the certification bounds.
    norm_g = float(np.max(np.abs(p.g))) if n else 0.0
    scale_k = min(1.0, max(float(np.max(np.abs(p.h))) if n else 0.0, norm_g))
    scale_g = scale_k + norm_g  # <= 1 + |g|, reference for stationarity
    comp_ref = scale_k  # <= 1, reference for complementarity

    H2 = 2.0 * p.h + s.regularization * np.eye(n)

    if m == 0:
        cf = None
        for boost in (0.0, s.regularization, s.regularization * 1e3, s.regularization * 1e6):
            try:
                cf = sla.cho_factor(2.0 * p.h + boost * np.eye(n), lower=True, check_finite=False)
                break
            except np.linalg.LinAlgError:
                continue
        if cf is None:
            return QpSolution(np.zeros(n), np.zeros(0), QpStatus.NUMERICAL_FAILURE, 0,
                              np.inf, np.inf, np.inf)
        u = sla.cho_solve(cf, -p.g, check_finite=False)
        r_stat, r_prim, r_comp = _residuals(p, u, np.zeros(0))
        return QpSolution(u, np.zeros(0), QpStatus.OPTIMAL, 0, r_stat, r_prim, r_comp)

    u = np.zeros(n) if s.warm_start is None else np.asarray(s.warm_start, dtype=float).copy()
    if u.shape != (n,):
        raise ValueError("warm start dimension mismatch")
    slack = np.maximum(p.d - p.c @ u, 1.0) * 1.1
    lam = np.ones(m)

    single, s_cols, s_vals, general = _split_single_nonzero_rows(p.c)
    Cg = p.c[general]

    best = None
    best_metric = np.inf

    def record_best(u, lam):
        nonlocal best, best_metric
        r_stat, r_prim, r_comp = _residuals(p, u, lam)
        metric = max(r_stat / scale_g, r_prim, r_comp / max(comp_ref, 1e-300))
        if metric < best_metric:
            best_metric = metric
            best = (u.copy(), lam.copy(), r_stat, r_prim, r_comp)
        return r_stat, r_prim, r_comp

    tau = s.fraction_to_boundary
    reg = s.regularization
    K = np.empty_like(H2)
    for it in range(s.max_iterations):
        r_stat, r_prim, r_comp = record_best(u, lam)
        if r_stat <= tol * scale_g and r_prim <= tol and r_comp <= tol * comp_ref:
            return QpSolution(u, lam, QpStatus.OPTIMAL, it, r_stat, r_prim, r_comp)
        if np.max(lam) > 1e12 and r_prim > 1e-6:
            ub, lb, rs, rp, rc = best
            return QpSolution(ub, lb, QpStatus.PRIMAL_INFEASIBLE, it, rs, rp, rc)

        d_scale = lam / slack
        np.copyto(K, H2)
        diag = np.einsum("ii->i", K)
        if single.size:
            diag += np.bincount(s_cols, weights=d_scale[single] * s_vals * s_vals, minlength=n)
        if general.size:
            K += (Cg * d_scale[general, None]).T @ Cg

        cf = None
        boost = 0.0
        for _ in range(4):
            try:
                cf = sla.cho_factor(K, lower=True, check_finite=False)
                break
            except np.linalg.LinAlgError:
                step = max(reg * 1e3, 1e-12) if boost == 0.0 else boost * 1e3
                diag += step - boost
                boost = step
        if cf is None:
            ub, lb, rs, rp, rc = best
            return QpSolution(ub, lb, QpStatus.NUMERICAL_FAILURE, it, rs, rp, rc)

        r_dual = 2.0 * p.h @ u + p.g + p.c.T @ lam
        r_pri = p.c @ u + slack - p.d
        mu = float(lam @ slack) / m

        def kkt_step(r_comp_vec):
            rhs = -r_dual - p.c.T @ ((r_comp_vec + lam * r_pri) / slack)
            du = sla.cho_solve(cf, rhs, check_finite=False)
            ds = -r_pri - p.c @ du
            dlam = (r_comp_vec - lam * ds) / slack
            return du, dlam, ds

        # affine scaling direction
        du_a, dlam_a, ds_a = kkt_step(-lam * slack)
        alpha_p = _max_step(slack, ds_a)
        alpha_d = _max_step(lam, dlam_a)
        mu_aff = float((lam + alpha_d * dlam_a) @ (slack + alpha_p * ds_a)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # corrector with centering
        comp = -lam * slack - dlam_a * ds_a + sigma * mu
        du, dlam, ds = kkt_step(comp)
        alpha_p = tau * _max_step(slack, ds)
        alpha_d = tau * _max_step(lam, dlam)
        alpha = min(alpha_p, alpha_d)
        u = u + alpha * du
        slack = slack + alpha * ds
        lam = lam + alpha * dlam
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(slack))):
            ub, lb, rs, rp, rc = best
            return QpSolution(ub, lb, QpStatus.NUMERICAL_FAILURE, it + 1, rs, rp, rc)

    r_stat, r_prim, r_comp = record_best(u, lam)
    if r_stat <= tol * scale_g and r_prim <= tol and r_comp <= tol * comp_ref:
        return QpSolution(u, lam, QpStatus.OPTIMAL, s.max_iterations, r_stat, r_prim, r_comp)
    ub, lb, rs, rp, rc = best
    return QpSolution(ub, lb, QpStatus.MAX_ITERATIONS, s.max_iterations, rs, rp, rc)


def _max_step(x: np.ndarray, dx: np.ndarray) -> float:
    """Largest step in [0, 1] keeping x + a*dx > 0."""
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-x[neg] / dx[neg])))
