"""Iterated error-state Kalman update fusing point-to-plane and Doppler residuals.

Geometry rows are signed point-to-plane distances of scan points projected
into the world through the current iterate.  Doppler rows are
``scale * (predicted - measured)`` with the predicted doppler
``-r . R_sb^T (R^T v + (w - b_g) x p_sb)``.  Both families are stacked as
independent scalar rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .manifold import (
    BG, EXT_POS, EXT_ROT, POS, ROT, STATE_DIM, VEL, NavState, boxminus, boxplus, right_jacobian, so3_log,
)
from .mapping import MapIndex, fit_planes
from .propagation import StateWithCov, sensor_velocity
from .sensors import NoiseParams, Scan

log = logging.getLogger(__name__)


class InsufficientCorrespondenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class UpdateConfig:
    max_iterations: int = 4
    convergence_eps: float = 1e-4
    min_valid_points: int = 10
    sigma_interval_mode: str = "scale_by_dt"  # or "unit"
    huber_delta: float | None = None
    neighbors: int = 5
    plane_threshold: float | None = None  # None: 2 x point sigma
    max_neighbor_dist: float = 1.5
    max_geo_residual: float | None = None  # None: 10 x point sigma
    use_geometry: bool = True
    use_doppler: bool = True
    estimate_extrinsic: bool = True
    max_condition: float = 1e12
    # reuse the previous correspondences while the sensor pose moved less than this
    # (metres; rotation counted as its arc at reassociate_range)
    reassociate_tol: float = 0.01
    reassociate_range: float = 50.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.sigma_interval_mode not in ("scale_by_dt", "unit"):
            raise ValueError(f"unknown sigma_interval_mode {self.sigma_interval_mode!r}")


@dataclass
class ResidualBlock:
    point_index: int
    geo_residual: float
    geo_jacobian: np.ndarray
    doppler_residual: float
    doppler_jacobian: np.ndarray
    geo_var: float
    doppler_var: float
    geo_valid: bool
    doppler_valid: bool


@dataclass
class Association:
    """Plane per point, frozen for one iteration."""

    point_index: np.ndarray
    normal: np.ndarray
    centroid: np.ndarray
    plane_valid: np.ndarray


@dataclass
class Residuals:
    point_index: np.ndarray
    geo_r: np.ndarray
    geo_H: np.ndarray
    geo_valid: np.ndarray
    dop_r: np.ndarray
    dop_H: np.ndarray
    dop_valid: np.ndarray
    geo_var: float
    dop_var: float

    def __len__(self) -> int:
        return len(self.point_index)

    def block(self, i: int) -> ResidualBlock:
        return ResidualBlock(int(self.point_index[i]), float(self.geo_r[i]), self.geo_H[i].copy(),
                             float(self.dop_r[i]), self.dop_H[i].copy(), self.geo_var, self.dop_var,
                             bool(self.geo_valid[i]), bool(self.dop_valid[i]))

    def stacked(self):
        """Rows (H, r, variance) of all valid residuals."""
        H = np.concatenate([self.geo_H[self.geo_valid], self.dop_H[self.dop_valid]])
        r = np.concatenate([self.geo_r[self.geo_valid], self.dop_r[self.dop_valid]])
        var = np.concatenate([np.full(int(self.geo_valid.sum()), self.geo_var),
                              np.full(int(self.dop_valid.sum()), self.dop_var)])
        return H, r, var

    @property
    def usable(self) -> int:
        return int((self.geo_valid | self.dop_valid).sum())


@dataclass
class UpdateDiagnostics:
    iterations: int = 0
    geo_rows: int = 0
    doppler_rows: int = 0
    rejected: int = 0
    final_cost: float = float("nan")
    condition: float = float("nan")
    costs: list = field(default_factory=list)
    diverged: bool = False
    skipped: bool = False
    damped: bool = False


def doppler_scale(cfg: UpdateConfig, frame_dt: float) -> float:
    return frame_dt if cfg.sigma_interval_mode == "scale_by_dt" else 1.0


def plane_threshold(cfg: UpdateConfig, noise: NoiseParams) -> float:
    return cfg.plane_threshold if cfg.plane_threshold is not None else 2.0 * noise.point_sigma


def residual_gate(cfg: UpdateConfig, noise: NoiseParams) -> float:
    return cfg.max_geo_residual if cfg.max_geo_residual is not None else 10.0 * noise.point_sigma


def associate(scan: Scan, state: NavState, index: MapIndex, cfg: UpdateConfig,
              noise: NoiseParams = NoiseParams()) -> Association:
    idx = np.flatnonzero(scan.static_mask())
    m = scan.xyz[idx]
    n = len(idx)
    if n == 0 or len(index) < cfg.neighbors or not cfg.use_geometry:
        return Association(idx, np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n, dtype=bool))
    T = state.sensor_pose()
    mw = T.apply(m)
    D, I = index.knn_batch(mw, cfg.neighbors, max_dist=cfg.max_neighbor_dist)
    neigh = index.gather(np.maximum(I, 0))
    normal, cent, _, valid = fit_planes(neigh, plane_threshold(cfg, noise), viewpoint=T.trans)
    valid &= D[:, -1] <= cfg.max_neighbor_dist**2
    return Association(idx, normal, cent, valid)


def evaluate(scan: Scan, state: NavState, assoc: Association, gyro_end, cfg: UpdateConfig,
             noise: NoiseParams, frame_dt: float, jacobians: bool = True) -> Residuals:
    idx = assoc.point_index
    n = len(idx)
    m = scan.xyz[idx]
    Rb, pb, Rs, ps = state.rot, state.pos, state.ext_rot, state.ext_pos
    mb = m @ Rs.T + ps
    mw = mb @ Rb.T + pb
    u = assoc.normal
    geo_r = np.einsum("ij,ij->i", u, mw - assoc.centroid)
    geo_valid = assoc.plane_valid & (np.abs(geo_r) <= residual_gate(cfg, noise))

    scale = doppler_scale(cfg, frame_dt)
    r_dir = m / np.linalg.norm(m, axis=1, keepdims=True)
    vs = sensor_velocity(state, gyro_end)
    dop_r = scale * (-(r_dir @ vs) - scan.doppler[idx])
    dop_valid = np.full(n, cfg.use_doppler)

    geo_H = np.zeros((n, STATE_DIM))
    dop_H = np.zeros((n, STATE_DIM))
    if jacobians:
        a = u @ Rb  # R_b^T u per row
        geo_H[:, ROT] = -np.cross(a, mb)
        geo_H[:, POS] = u
        geo_H[:, EXT_ROT] = -np.cross(a @ Rs, m)
        geo_H[:, EXT_POS] = a

        vb = Rb.T @ state.vel
        w = np.asarray(gyro_end) - state.bias_gyro
        s = r_dir @ Rs.T
        dop_H[:, ROT] = -np.cross(s, vb)
        dop_H[:, VEL] = -(s @ Rb.T)
        dop_H[:, BG] = -np.cross(s, ps)
        dop_H[:, EXT_ROT] = -np.cross(r_dir, vs)
        dop_H[:, EXT_POS] = -np.cross(s, w)
        dop_H *= scale
        if not cfg.estimate_extrinsic:
            geo_H[:, 6:12] = 0.0
            dop_H[:, 6:12] = 0.0

    return Residuals(idx, geo_r, geo_H, geo_valid, dop_r, dop_H, dop_valid,
                     noise.point_sigma**2, (scale * noise.doppler_sigma) ** 2)


def build_residuals(scan: Scan, swc: StateWithCov, index: MapIndex, gyro_end, cfg: UpdateConfig,
                    noise: NoiseParams, frame_dt: float = 0.1) -> Residuals:
    """Residual rows for every static point at the current iterate."""
    assoc = associate(scan, swc.state, index, cfg, noise)
    res = evaluate(scan, swc.state, assoc, gyro_end, cfg, noise, frame_dt)
    if res.usable < cfg.min_valid_points:
        raise InsufficientCorrespondenceError(
            f"only {res.usable} usable points (need {cfg.min_valid_points})")
    return res


def _weights(r: np.ndarray, var: np.ndarray, huber: float | None) -> np.ndarray:
    w = 1.0 / var
    if huber is not None:
        z = np.abs(r) * np.sqrt(w)
        w = np.where(z <= huber, w, w * huber / np.maximum(z, 1e-300))
    return w


def _jinv(e: np.ndarray) -> np.ndarray:
    """Inverse of d((x boxplus d) boxminus x_prior)/dd at d = 0."""
    Ji = np.eye(STATE_DIM)
    Ji[ROT, ROT] = right_jacobian(e[ROT])
    Ji[EXT_ROT, EXT_ROT] = right_jacobian(e[EXT_ROT])
    return Ji


def _cost(e, Pinv_hat, res: Residuals, huber) -> float:
    H, r, var = res.stacked()
    w = _weights(r, var, huber)
    return float(e @ Pinv_hat @ e + np.sum(w * r * r))


def iekf_update(swc: StateWithCov, scan: Scan, index: MapIndex, gyro_end, cfg: UpdateConfig,
                noise: NoiseParams, frame_dt: float = 0.1) -> tuple[StateWithCov, UpdateDiagnostics]:
    """Iterated update; returns the posterior and per-frame diagnostics.

    Raises InsufficientCorrespondenceError when too few rows are usable at
    the prior, in which case the caller keeps the propagated state.
    """
    diag = UpdateDiagnostics()
    x_hat, P_hat = swc.state, swc.cov
    active = np.ones(STATE_DIM, dtype=bool)
    if not cfg.estimate_extrinsic:
        active[6:12] = False
    ai = np.flatnonzero(active)
    Pinv_hat = np.zeros_like(P_hat)
    Pinv_hat[np.ix_(ai, ai)] = np.linalg.inv(P_hat[np.ix_(ai, ai)])

    x = x_hat
    increases = 0
    shrink = 1.0
    A_inv = None
    cache: list = []  # (sensor pose, association)

    def assoc_at(xs: NavState) -> Association:
        T = xs.sensor_pose()
        if cache:
            T0, a0 = cache[0]
            d = T0.inverse() @ T
            moved = np.linalg.norm(d.trans) + np.linalg.norm(so3_log(d.rot)) * cfg.reassociate_range
            if moved <= cfg.reassociate_tol:
                return a0
        a = associate(scan, xs, index, cfg, noise)
        cache[:] = [(T, a)]
        return a

    for it in range(cfg.max_iterations):
        assoc = assoc_at(x)
        res = evaluate(scan, x, assoc, gyro_end, cfg, noise, frame_dt)
        if it == 0 and res.usable < cfg.min_valid_points:
            raise InsufficientCorrespondenceError(
                f"only {res.usable} usable points (need {cfg.min_valid_points})")
        H, r, var = res.stacked()
        w = _weights(r, var, cfg.huber_delta)
        e = boxminus(x, x_hat)
        Ji = _jinv(e)
        P = Ji @ P_hat @ Ji.T
        Pa = P[np.ix_(ai, ai)]
        Pa_inv = np.linalg.inv(0.5 * (Pa + Pa.T))
        Ha = H[:, ai]
        HtWH = Ha.T @ (Ha * w[:, None])
        A = HtWH + Pa_inv
        cond = np.linalg.cond(A)
        diag.condition = float(cond)
        if cond > cfg.max_condition:
            log.warning("ill-conditioned normal matrix (cond %.3e); damping step", cond)
            A = A + np.eye(len(ai)) * np.trace(A) / len(ai) * 1e-9
            diag.damped = True
        g = Ha.T @ (w * r) + Pa_inv @ (Ji @ e)[ai]
        A_inv = np.linalg.inv(A)
        da = -A_inv @ g
        delta = np.zeros(STATE_DIM)
        delta[ai] = da

        cost0 = _cost(e, Pinv_hat, res, cfg.huber_delta)
        if it == 0:
            diag.costs.append(cost0)
        diag.iterations = it + 1
        # quadratic-model decrease of the full step; below rounding level we are converged
        if float(g @ A_inv @ g) <= 1e-10 * max(cost0, 1.0):
            break
        step = delta * shrink
        accepted = False
        for _ in range(6):
            cand = boxplus(x, step)
            cres = evaluate(scan, cand, assoc, gyro_end, cfg, noise, frame_dt, jacobians=False)
            c1 = _cost(boxminus(cand, x_hat), Pinv_hat, cres, cfg.huber_delta)
            if c1 <= cost0:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            increases += 1
            shrink *= 2.0**-6
            if increases >= 3:
                diag.diverged = True
                log.warning("update diverged at t=%.3f; reverting to prior", scan.end_time)
                return swc.copy(), diag
            continue
        increases = 0
        shrink = 1.0
        x = cand
        diag.costs.append(c1)
        if np.linalg.norm(step) < cfg.convergence_eps:
            break

    assoc = assoc_at(x)
    res = evaluate(scan, x, assoc, gyro_end, cfg, noise, frame_dt)
    H, r, var = res.stacked()
    w = _weights(r, var, cfg.huber_delta)
    e = boxminus(x, x_hat)
    Ji = _jinv(e)
    P = Ji @ P_hat @ Ji.T
    Pa = P[np.ix_(ai, ai)]
    Ha = H[:, ai]
    A = Ha.T @ (Ha * w[:, None]) + np.linalg.inv(0.5 * (Pa + Pa.T))
    P_post = P.copy()
    Pa_post = np.linalg.inv(A)
    P_post[np.ix_(ai, ai)] = Pa_post
    # cross terms between estimated and fixed blocks shrink consistently
    fi = np.flatnonzero(~active)
    if len(fi):
        gain = Pa_post @ np.linalg.inv(Pa)
        P_post[np.ix_(ai, fi)] = gain @ P[np.ix_(ai, fi)]
        P_post[np.ix_(fi, ai)] = P_post[np.ix_(ai, fi)].T
    P_post = 0.5 * (P_post + P_post.T)
    diag.geo_rows = int(res.geo_valid.sum())
    diag.doppler_rows = int(res.dop_valid.sum())
    diag.rejected = int(len(res) - res.usable)
    diag.final_cost = _cost(e, Pinv_hat, res, cfg.huber_delta)
    return StateWithCov(x, P_post, swc.t), diag
