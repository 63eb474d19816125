"""Keyframes, place recognition, pose-graph optimisation and online extrinsic
calibration.

The graph holds one pose per keyframe, optional world velocities per
keyframe and an optional extrinsic node.  Factor types: pose prior, relative
pose (odometry and loop closure), IMU preintegration, ego velocity and
extrinsic prior.  Rotations are perturbed on the right, positions and
velocities additively, matching the front-end state.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .manifold import RigidTransform, hat, normalize_rotation, right_jacobian, right_jacobian_inv, so3_exp, so3_log
from .doppler import DegenerateGeometryError, estimate_ego_velocity_lsq
from .mapping import MapIndex, fit_planes, voxel_downsample_indices
from .sensors import ImuSample, NoiseParams

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------- configs


@dataclass(frozen=True)
class KeyframePolicy:
    min_translation: float = 1.0
    min_rotation_deg: float = 10.0
    cloud_scans: int = 10  # recent scans aggregated into a keyframe cloud
    cloud_voxel: float = 0.3

    def should_key(self, last: RigidTransform | None, pose: RigidTransform) -> bool:
        if last is None:
            return True
        d = last.inverse() @ pose
        return (np.linalg.norm(d.trans) >= self.min_translation
                or np.degrees(np.linalg.norm(so3_log(d.rot))) >= self.min_rotation_deg)


@dataclass(frozen=True)
class LoopConfig:
    rings: int = 20
    sectors: int = 60
    max_radius: float = 60.0
    height_offset: float = 2.0
    statistic: str = "max_height"  # or "occupancy"
    candidates: int = 10
    threshold: float = 0.25
    exclude_recent: int = 30
    max_distance: float = 20.0  # candidate gate on estimated positions, 0 = off
    cooldown: int = 5  # keyframes skipped after an accepted loop
    icp_iterations: int = 30
    icp_schedule: tuple = (3.0, 1.5, 1.0)
    normal_k: int = 20
    submap_radius: int = 5  # old keyframes on each side forming the ICP target
    source_keyframes: int = 5  # preceding keyframes merged into the ICP source
    proximity: bool = True  # also try the nearest old keyframe by estimated position
    inlier_dist: float = 1.0
    max_rms: float = 0.6
    min_inlier_ratio: float = 0.6
    ground_clearance: float = 0.5


@dataclass(frozen=True)
class GraphConfig:
    prior_sigma: float = 1e-4
    odom_sigma_t: float = 0.05
    odom_sigma_r_deg: float = 0.5
    odom_gate_inflation: float = 10.0  # applied when the front end skipped an update in the interval
    loop_sigma_t: float = 0.3
    loop_sigma_r_deg: float = 1.0
    ego_sigma_floor: float = 0.05
    preint_floor: float = 1e-6
    rate_sigma: float = 0.1  # m/s, velocity vs. finite-differenced keyframe positions
    preint_bias_gyro_sigma: float = 5e-3  # rad/s
    preint_bias_acc_sigma: float = 0.02  # m/s^2
    rebuild_map: bool = True


@dataclass(frozen=True)
class LMConfig:
    max_iterations: int = 50
    rel_tol: float = 1e-6
    step_tol: float = 1e-10
    lambda_init: float = 1e-4
    lambda_max: float = 1e8


@dataclass(frozen=True)
class CalibConfig:
    min_keyframes: int = 20
    min_yaw_rate_rms: float = 0.05  # rad/s
    every: int = 50  # keyframes between calibration solves
    ext_prior_rot_sigma: float = 0.1
    ext_prior_pos_sigma: float = 0.15
    bias_gyro_sigma: float = 0.01  # prior on the bias node, rad/s
    bias_acc_sigma: float = 0.5  # m/s^2
    gravity_dir_sigma: float = 0.05  # rad, prior on the gravity direction; <= 0 keeps it fixed


# ----------------------------------------------------------------------------- preintegration


@dataclass
class Preintegration:
    """Gravity-free IMU delta over an interval, integrated with fixed biases.

    Uses the same discrete step as the front end, so composing consecutive
    deltas reproduces a single long integration exactly (up to rounding).
    """

    bias_gyro: np.ndarray
    bias_acc: np.ndarray
    dR: np.ndarray = field(default_factory=lambda: np.eye(3))
    dv: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dt: float = 0.0
    cov: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))
    # first-order sensitivities of the deltas to the biases
    dR_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dv_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dp_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dv_dba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dp_dba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def integrate(self, gyro, accel, dt: float, noise: NoiseParams | None = None) -> None:
        w = np.asarray(gyro, dtype=float) - self.bias_gyro
        a = np.asarray(accel, dtype=float) - self.bias_acc
        Ra = self.dR @ a
        if noise is not None:
            E = so3_exp(w * dt)
            A = np.eye(9)
            A[0:3, 0:3] = E.T
            A[3:6, 0:3] = -self.dR @ hat(a) * dt
            A[6:9, 0:3] = -0.5 * self.dR @ hat(a) * dt * dt
            A[6:9, 3:6] = np.eye(3) * dt
            B = np.zeros((9, 6))
            B[0:3, 0:3] = right_jacobian(w * dt) * dt
            B[3:6, 3:6] = self.dR * dt
            B[6:9, 3:6] = 0.5 * self.dR * dt * dt
            Q = np.diag([noise.gyro_noise**2 / dt] * 3 + [noise.acc_noise**2 / dt] * 3)
            self.cov = A @ self.cov @ A.T + B @ Q @ B.T
        self.dp = self.dp + self.dv * dt + 0.5 * Ra * dt * dt
        self.dv = self.dv + Ra * dt
        Ag = self.dR @ hat(a) @ self.dR_dbg
        self.dp_dbg = self.dp_dbg + self.dv_dbg * dt - 0.5 * Ag * dt * dt
        self.dv_dbg = self.dv_dbg - Ag * dt
        self.dp_dba = self.dp_dba + self.dv_dba * dt - 0.5 * self.dR * dt * dt
        self.dv_dba = self.dv_dba - self.dR * dt
        step = so3_exp(w * dt)
        self.dR_dbg = step.T @ self.dR_dbg - right_jacobian(w * dt) * dt
        self.dR = normalize_rotation(self.dR @ step)
        self.dt += dt

    def integrate_samples(self, samples: list[ImuSample], last: ImuSample | None, t0: float, t1: float,
                          noise: NoiseParams | None = None) -> None:
        """Integrate over [t0, t1]; each interval uses the latest sample at or before its start."""
        seq = ([last] if last is not None else []) + list(samples)
        st = [s.t for s in seq]
        bounds = [t0] + [t for t in st if t0 < t < t1] + [t1]
        j = 0
        for ta, tb in zip(bounds[:-1], bounds[1:]):
            if tb <= ta:
                continue
            while j + 1 < len(seq) and seq[j + 1].t <= ta:
                j += 1
            self.integrate(seq[j].gyro, seq[j].accel, tb - ta, noise)

    def compose(self, other: "Preintegration") -> "Preintegration":
        a, b = self, other
        return Preintegration(
            a.bias_gyro, a.bias_acc, normalize_rotation(a.dR @ b.dR), a.dv + a.dR @ b.dv,
            a.dp + a.dv * b.dt + a.dR @ b.dp, a.dt + b.dt,
            a.cov.copy(),  # only meaningful for the first part; callers needing it re-integrate
            dR_dbg=b.dR.T @ a.dR_dbg + b.dR_dbg,
            dv_dbg=a.dv_dbg - a.dR @ hat(b.dv) @ a.dR_dbg + a.dR @ b.dv_dbg,
            dp_dbg=a.dp_dbg + a.dv_dbg * b.dt - a.dR @ hat(b.dp) @ a.dR_dbg + a.dR @ b.dp_dbg,
            dv_dba=a.dv_dba + a.dR @ b.dv_dba,
            dp_dba=a.dp_dba + a.dv_dba * b.dt + a.dR @ b.dp_dba,
        )

    def corrected(self, bias_gyro, bias_acc):
        """(dR, dv, dp) re-linearised to new biases."""
        dg = np.asarray(bias_gyro) - self.bias_gyro
        da = np.asarray(bias_acc) - self.bias_acc
        dR = self.dR @ so3_exp(self.dR_dbg @ dg)
        return dR, self.dv + self.dv_dbg @ dg + self.dv_dba @ da, self.dp + self.dp_dbg @ dg + self.dp_dba @ da

    def predict(self, Ri, pi, vi, gravity):
        """State at the interval end given the start state."""
        T = self.dt
        return (Ri @ self.dR, pi + vi * T + 0.5 * gravity * T * T + Ri @ self.dp, vi + gravity * T + Ri @ self.dv)


# ----------------------------------------------------------------------------- descriptor


@dataclass
class Descriptor:
    grid: np.ndarray  # (rings, sectors)
    ring_key: np.ndarray

    @property
    def shape(self):
        return self.grid.shape


def make_descriptor(points: np.ndarray, cfg: LoopConfig) -> Descriptor:
    """Polar grid over a gravity-levelled cloud centred at the sensor."""
    R, S = cfg.rings, cfg.sectors
    grid = np.zeros((R, S))
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts):
        rng_ = np.hypot(pts[:, 0], pts[:, 1])
        keep = (rng_ < cfg.max_radius) & (rng_ > 0)
        pts, rng_ = pts[keep], rng_[keep]
        ring = np.minimum((rng_ / cfg.max_radius * R).astype(int), R - 1)
        ang = np.arctan2(pts[:, 1], pts[:, 0])
        sector = np.minimum(((ang + np.pi) / (2 * np.pi) * S).astype(int), S - 1)
        if cfg.statistic == "occupancy":
            np.add.at(grid, (ring, sector), 1.0)
        else:
            val = np.maximum(pts[:, 2] + cfg.height_offset, 1e-3)
            np.maximum.at(grid, (ring, sector), val)
    key = (grid > 0).mean(axis=1)
    return Descriptor(grid, key)


def descriptor_distance(a: Descriptor, b: Descriptor) -> tuple[float, int]:
    """Minimum over cyclic sector shifts of the column cosine distance, averaged
    over columns occupied in either grid.

    Returns (distance, shift) with ``a ~ roll(b, -shift)``, i.e. b's scene is
    a's rotated by +shift sectors.
    """
    A, B = a.grid, b.grid
    S = A.shape[1]
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    An = np.divide(A, na, out=np.zeros_like(A), where=na > 0)
    Bn = np.divide(B, nb, out=np.zeros_like(B), where=nb > 0)
    best, best_k = 1.0, 0
    for k in range(S):
        Bk = np.roll(Bn, -k, axis=1)
        nbk = np.roll(nb, -k)
        both = (na > 0) & (nbk > 0)
        either = int(((na > 0) | (nbk > 0)).sum())
        if not both.any():
            continue
        # columns occupied in only one grid count as dissimilar, which matters for narrow fields of view
        sim = np.sum(An[:, both] * Bk[:, both])
        d = 1.0 - float(sim) / either
        if d < best - 1e-15:
            best, best_k = d, k
    return best, best_k


# ----------------------------------------------------------------------------- keyframes


@dataclass
class Keyframe:
    id: int
    t: float
    pose: RigidTransform  # current estimate (world <- body)
    odom_rel: RigidTransform | None  # front-end motion from the previous keyframe
    vel: np.ndarray
    bias_gyro: np.ndarray
    bias_acc: np.ndarray
    gyro: np.ndarray  # raw gyro at t
    ego_vel: np.ndarray | None
    ego_cov: np.ndarray | None
    cloud: np.ndarray  # body frame
    descriptor: Descriptor
    preint: Preintegration | None  # from the previous keyframe to this one
    odom_gated: bool = False
    ext: RigidTransform | None = None  # front-end extrinsic when the keyframe was made

    def sensor_odom(self, prev: "Keyframe") -> RigidTransform:
        """Front-end motion of the sensor frame from ``prev`` to this keyframe."""
        E0 = prev.ext if prev.ext is not None else RigidTransform.identity()
        E1 = self.ext if self.ext is not None else RigidTransform.identity()
        return E0.inverse() @ self.odom_rel @ E1


@dataclass
class LoopClosure:
    i: int  # older keyframe
    j: int  # newer keyframe
    rel: RigidTransform  # pose of j in i
    distance: float
    rms: float
    inlier_ratio: float


def _levelled(cloud_body: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Remove yaw from the body orientation and express the cloud in that frame."""
    yaw = math.atan2(rot[1, 0], rot[0, 0])
    R_level = so3_exp([0, 0, -yaw]) @ rot
    return cloud_body @ R_level.T


def detect_loop(kf: Keyframe, history: list[Keyframe], cfg: LoopConfig) -> list[tuple[int, float, float]]:
    """Candidate earlier keyframes for ``kf`` as (id, yaw hint rad, descriptor distance), best first.

    Descriptor matches under the threshold come first; the nearest old keyframe by
    estimated position is appended when ``cfg.proximity`` is set.
    """
    pool = [h for h in history if h.id < kf.id - cfg.exclude_recent]
    if cfg.max_distance > 0:
        pool = [h for h in pool if np.linalg.norm(h.pose.trans - kf.pose.trans) <= cfg.max_distance]
    if not pool:
        return []
    keys = np.array([h.descriptor.ring_key for h in pool])
    dk = np.linalg.norm(keys - kf.descriptor.ring_key, axis=1)
    order = np.argsort(dk, kind="stable")[: cfg.candidates]
    out = []
    for o in order:
        d, k = descriptor_distance(kf.descriptor, pool[o].descriptor)
        if d <= cfg.threshold:
            out.append((pool[o].id, k * 2 * np.pi / cfg.sectors, d))
    out.sort(key=lambda c: c[2])
    if cfg.proximity:
        near = min(pool, key=lambda h: np.linalg.norm(h.pose.trans - kf.pose.trans))
        if all(c[0] != near.id for c in out):
            d, k = descriptor_distance(kf.descriptor, near.descriptor)
            out.append((near.id, k * 2 * np.pi / cfg.sectors, d))
    return out


def _icp(src: np.ndarray, tgt: np.ndarray, T0: RigidTransform, cfg: LoopConfig):
    """Point-to-plane ICP of ``src`` onto ``tgt``; returns (T, rms, inlier ratio, converged)."""
    tree = cKDTree(tgt)
    k = min(cfg.normal_k, len(tgt))
    _, nn = tree.query(tgt, k=k)
    normals, _, _, nvalid = fit_planes(tgt[nn], threshold=np.inf)
    R, t = T0.rot.copy(), T0.trans.copy()
    converged = False
    for max_d in cfg.icp_schedule:
        for _ in range(cfg.icp_iterations):
            p = src @ R.T + t
            d, j = tree.query(p, distance_upper_bound=max_d)
            ok = np.isfinite(d) & nvalid[np.minimum(j, len(tgt) - 1)]
            if ok.sum() < 6:
                return RigidTransform(R, t), np.full(len(src), np.inf), False
            n = normals[j[ok]]
            q = tgt[j[ok]]
            ps = src[ok]
            r = np.einsum("ij,ij->i", n, p[ok] - q)
            # d(R Exp(w) s + t) = -R [s]x w + dt
            Jw = np.cross(ps, n @ R)
            J = np.hstack([Jw, n])
            H = J.T @ J + 1e-9 * np.eye(6)
            dx = -np.linalg.solve(H, J.T @ r)
            R = normalize_rotation(R @ so3_exp(dx[:3]))
            t = t + dx[3:]
            if np.linalg.norm(dx) < 1e-8:
                converged = True
                break
    p = src @ R.T + t
    d, _ = tree.query(p)
    return RigidTransform(R, t), d, converged


def _submap(history: list[Keyframe], center: int, before: int, after: int) -> np.ndarray:
    ref = history[center].pose.inverse()
    lo, hi = max(0, center - before), min(len(history), center + after + 1)
    parts = [(ref @ h.pose).apply(h.cloud) for h in history[lo:hi] if len(h.cloud)]
    return np.concatenate(parts) if parts else np.zeros((0, 3))


def verify_loop(kf_new: Keyframe, history: list[Keyframe], old_id: int, yaw_hint: float, cfg: LoopConfig):
    """Register a submap ending at the new keyframe onto a submap around ``old_id``.

    Two seeds are tried: the current estimate of the relative pose, and the descriptor
    yaw hint with the estimated translation. Returns (relative pose, rms, ratio) or None.
    """
    kf_old = history[old_id]
    src = _submap(history, kf_new.id, cfg.source_keyframes, 0)
    tgt = _submap(history, old_id, cfg.submap_radius, cfg.submap_radius)
    if len(src) < 10 or len(tgt) < 10:
        return None
    T_est = kf_old.pose.inverse() @ kf_new.pose
    Ln = _level_rot(kf_new.pose.rot)
    Lo = _level_rot(kf_old.pose.rot)
    seeds = [T_est, RigidTransform(Lo.T @ so3_exp([0, 0, yaw_hint]) @ Ln, T_est.trans)]
    best = None
    for T0 in seeds:
        T, d, _ = _icp(src, tgt, T0, cfg)
        if not np.all(np.isfinite(T.trans)):
            continue
        # fitness on above-ground structure, so that flat ground alone cannot pass
        z = (src @ T.rot.T + T.trans) @ Lo.T
        struct = z[:, 2] > np.percentile(z[:, 2], 5) + cfg.ground_clearance
        dd = d[struct] if struct.sum() >= 10 else d
        inl = dd <= cfg.inlier_dist
        ratio = float(inl.mean()) if len(dd) else 0.0
        rms = float(np.sqrt(np.mean(dd[inl] ** 2))) if inl.any() else np.inf
        if best is None or ratio > best[2]:
            best = (T, rms, ratio)
    if best is not None and best[2] >= cfg.min_inlier_ratio and best[1] <= cfg.max_rms:
        return best
    return None


def _level_rot(rot: np.ndarray) -> np.ndarray:
    yaw = math.atan2(rot[1, 0], rot[0, 0])
    return so3_exp([0, 0, -yaw]) @ rot


# ----------------------------------------------------------------------------- factor graph


@dataclass
class Factor:
    kind: str  # prior | between | preint | ego | extprior
    keys: tuple
    meas: object
    sqrt_info: np.ndarray
    extra: dict = field(default_factory=dict)


class FactorGraph:
    """Poses, optional per-pose velocities and an optional extrinsic node."""

    def __init__(self, with_velocity: bool = False, with_extrinsic: bool = False, with_bias: bool = False,
                 with_gravity: bool = False):
        self.with_velocity = with_velocity
        self.with_extrinsic = with_extrinsic
        self.with_bias = with_bias
        self.with_gravity = with_gravity
        self.bias: np.ndarray | None = np.zeros(6) if with_bias else None  # (gyro, accelerometer) bias node
        self.gravity: np.ndarray | None = None  # direction estimated on the sphere (2 dof)
        self.poses: list[RigidTransform] = []
        self.vels: list[np.ndarray] = []
        self.ext: RigidTransform | None = None
        self.factors: list[Factor] = []
        self.flagged = False

    # -- structure

    def add_pose(self, T: RigidTransform, vel=None) -> int:
        self.poses.append(T)
        self.vels.append(np.zeros(3) if vel is None else np.asarray(vel, dtype=float))
        return len(self.poses) - 1

    def _pdim(self) -> int:
        return 9 if self.with_velocity else 6

    @property
    def dim(self) -> int:
        return (len(self.poses) * self._pdim() + (6 if self.with_extrinsic else 0) + (6 if self.with_bias else 0)
                + (2 if self.with_gravity else 0))

    def _off(self, key) -> int:
        kind, i = key
        if kind == "pose":
            return i * self._pdim()
        if kind == "vel":
            return i * self._pdim() + 6
        o = len(self.poses) * self._pdim()
        if kind == "ext":
            return o
        o += 6 if self.with_extrinsic else 0
        if kind == "bias":
            return o
        return o + (6 if self.with_bias else 0)

    def add_prior(self, i: int, T: RigidTransform, sigma_r: float, sigma_t: float) -> None:
        self.factors.append(Factor("prior", (("pose", i),), T, _sqrt_info([sigma_r] * 3 + [sigma_t] * 3)))

    def add_between(self, i: int, j: int, Z: RigidTransform, sigma_r: float, sigma_t: float, tag="odom") -> None:
        self.factors.append(Factor("between", (("pose", i), ("pose", j)), Z,
                                   _sqrt_info([sigma_r] * 3 + [sigma_t] * 3), {"tag": tag}))

    def add_preint(self, i: int, j: int, pre: Preintegration, gravity, floor: float = 1e-6,
                   bias_sigma: tuple = (0.0, 0.0)) -> None:
        """IMU delta between keyframes; with a bias node the delta is corrected to first order."""
        # biases are held at their front-end values; their uncertainty widens the factor
        sg, sa = bias_sigma
        T = pre.dt
        cov = pre.cov + floor**2 * np.eye(9)
        cov += np.diag([(sg * T) ** 2] * 3 + [(sa * T) ** 2] * 3 + [(0.5 * sa * T * T) ** 2] * 3)
        keys = (("pose", i), ("vel", i), ("pose", j), ("vel", j)) + ((("bias", 0),) if self.with_bias else ()) \
            + ((("grav", 0),) if self.with_gravity else ())
        self.factors.append(Factor("preint", keys, pre, _sqrt_info_cov(cov), {"g": np.asarray(gravity, dtype=float)}))

    def add_between_ext(self, i: int, j: int, Z: RigidTransform, sigma_r: float, sigma_t: float, tag="odom") -> None:
        """Relative motion measured between sensor poses T_b E."""
        self.factors.append(Factor("between_ext", (("pose", i), ("pose", j), ("ext", 0)), Z,
                                   _sqrt_info([sigma_r] * 3 + [sigma_t] * 3), {"tag": tag}))

    def add_gravity_prior(self, g0, sigma: float) -> None:
        self.factors.append(Factor("gravprior", (("grav", 0),), np.asarray(g0, dtype=float), _sqrt_info([sigma] * 3)))

    def add_bias_prior(self, b0, sigma_gyro: float, sigma_acc: float) -> None:
        self.factors.append(Factor("biasprior", (("bias", 0),), np.asarray(b0, dtype=float),
                                   _sqrt_info([sigma_gyro] * 3 + [sigma_acc] * 3)))

    def add_ego(self, i: int, v_meas, omega, cov) -> None:
        self.factors.append(Factor("ego", (("pose", i), ("vel", i), ("ext", 0)), np.asarray(v_meas, dtype=float),
                                   _sqrt_info_cov(cov), {"w": np.asarray(omega, dtype=float)}))

    def add_rate(self, i: int, a: int, b: int, dt: float, sigma: float) -> None:
        """Velocity of node ``i`` against the finite difference of positions ``a`` -> ``b``."""
        self.factors.append(Factor("rate", (("vel", i), ("pose", a), ("pose", b)), float(dt),
                                   _sqrt_info([sigma] * 3)))

    def add_ext_prior(self, E: RigidTransform, cov6) -> None:
        self.factors.append(Factor("extprior", (("ext", 0),), E, _sqrt_info_cov(cov6)))

    def connected(self) -> bool:
        n = len(self.poses)
        if n == 0:
            return False
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f in self.factors:
            ps = [k[1] for k in f.keys if k[0] in ("pose", "vel")]
            for a, b in zip(ps[:-1], ps[1:]):
                parent[find(a)] = find(b)
        return len({find(i) for i in range(n)}) == 1

    # -- evaluation

    def _get(self, key, poses, vels, ext, bias, grav):
        kind, i = key
        if kind == "pose":
            return poses[i]
        if kind == "vel":
            return vels[i]
        if kind == "ext":
            return ext
        if kind == "bias":
            return bias
        return grav

    def values(self):
        return self.poses, self.vels, self.ext, self.bias, self.gravity

    def set_values(self, vals) -> None:
        self.poses, self.vels, self.ext, self.bias, self.gravity = vals

    def linearize(self, poses, vels, ext, bias=None, grav=None, jacobians: bool = True):
        rows, cols, data, res = [], [], [], []
        r0 = 0
        for f in self.factors:
            vals = [self._get(k, poses, vels, ext, bias, grav) for k in f.keys]
            r, Js = _factor_eval(f, vals, jacobians)
            rw = f.sqrt_info @ r
            res.append(rw)
            if jacobians:
                for k, J in zip(f.keys, Js):
                    if J is None:
                        continue
                    Jw = f.sqrt_info @ J
                    o = self._off(k)
                    rr, cc = np.nonzero(np.ones_like(Jw, dtype=bool))
                    rows.append(rr + r0)
                    cols.append(cc + o)
                    data.append(Jw.ravel())
            r0 += len(r)
        res = np.concatenate(res) if res else np.zeros(0)
        if not jacobians:
            return res, None
        J = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(r0, self.dim))
        return res, J

    def cost(self, vals=None) -> float:
        r, _ = self.linearize(*(vals or self.values()), jacobians=False)
        return float(r @ r)

    def retract(self, dx):
        pd = self._pdim()
        poses, vels = [], []
        for i, T in enumerate(self.poses):
            d = dx[i * pd: i * pd + 6]
            poses.append(RigidTransform(normalize_rotation(T.rot @ so3_exp(d[:3])), T.trans + d[3:6]))
            vels.append(self.vels[i] + (dx[i * pd + 6: i * pd + 9] if self.with_velocity else 0.0))
        ext, bias = self.ext, self.bias
        o = len(self.poses) * pd
        if self.with_extrinsic:
            d = dx[o:o + 6]
            ext = RigidTransform(normalize_rotation(ext.rot @ so3_exp(d[:3])), ext.trans + d[3:6])
            o += 6
        if self.with_bias:
            bias = bias + dx[o:o + 6]
            o += 6
        grav = self.gravity
        if self.with_gravity:
            grav = so3_exp(gravity_basis(grav) @ dx[o:o + 2]) @ grav
        return poses, vels, ext, bias, grav

    def dump(self, path) -> None:
        with open(path, "w") as f:
            for i, T in enumerate(self.poses):
                w, x, y, z = _quat(T.rot)
                f.write(f"POSE {i} {T.trans[0]!r} {T.trans[1]!r} {T.trans[2]!r} {w!r} {x!r} {y!r} {z!r}\n")
            if self.ext is not None:
                w, x, y, z = _quat(self.ext.rot)
                t = self.ext.trans
                f.write(f"EXTRINSIC {t[0]!r} {t[1]!r} {t[2]!r} {w!r} {x!r} {y!r} {z!r}\n")
            for f_ in self.factors:
                keys = " ".join(f"{k[0]}:{k[1]}" for k in f_.keys)
                tag = f_.extra.get("tag", "")
                f.write(f"FACTOR {f_.kind}{'/' + tag if tag else ''} {keys} dim={f_.sqrt_info.shape[0]}\n")


def gravity_basis(g: np.ndarray) -> np.ndarray:
    """3x2 orthonormal basis of the plane perpendicular to ``g``."""
    u = g / np.linalg.norm(g)
    a = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = a - (a @ u) * u
    b1 /= np.linalg.norm(b1)
    return np.stack([b1, np.cross(u, b1)], axis=1)


def _quat(R):
    from .manifold import rot_to_quat

    return [float(v) for v in rot_to_quat(R)]


def _sqrt_info(sigmas) -> np.ndarray:
    return np.diag(1.0 / np.asarray(sigmas, dtype=float))


def _sqrt_info_cov(cov) -> np.ndarray:
    cov = 0.5 * (np.asarray(cov, dtype=float) + np.asarray(cov, dtype=float).T)
    L = np.linalg.cholesky(cov)
    return np.linalg.inv(L)  # W^T W = cov^-1


def _between_eval(Ti: RigidTransform, Tj: RigidTransform, Z: RigidTransform, jac: bool):
    Ri, Rj, dR = Ti.rot, Tj.rot, Z.rot
    E = dR.T @ Ri.T @ Rj
    e = so3_log(E)
    dpw = Tj.trans - Ti.trans
    tp = Ri.T @ dpw
    rp = dR.T @ (tp - Z.trans)
    r = np.concatenate([e, rp])
    if not jac:
        return r, None
    Jri = right_jacobian_inv(e)
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[0:3, 0:3] = -Jri @ Rj.T @ Ri
    Jj[0:3, 0:3] = Jri
    Ji[3:6, 0:3] = dR.T @ hat(tp)
    Ji[3:6, 3:6] = -dR.T @ Ri.T
    Jj[3:6, 3:6] = dR.T @ Ri.T
    return r, [Ji, Jj]


def _factor_eval(f: Factor, vals, jac: bool):
    if f.kind in ("prior", "extprior"):
        T, Z = vals[0], f.meas
        e = so3_log(Z.rot.T @ T.rot)
        r = np.concatenate([e, T.trans - Z.trans])
        if not jac:
            return r, None
        J = np.zeros((6, 6))
        J[0:3, 0:3] = right_jacobian_inv(e)
        J[3:6, 3:6] = np.eye(3)
        return r, [J]
    if f.kind == "between":
        return _between_eval(vals[0], vals[1], f.meas, jac)
    if f.kind == "between_ext":
        Ti, Tj, E = vals
        r, Js = _between_eval(Ti @ E, Tj @ E, f.meas, jac)
        if not jac:
            return r, None
        # chain through A = T E (right rotation perturbation, additive world translation)
        out, JE = [], np.zeros((6, 6))
        for T, JA in zip((Ti, Tj), Js):
            dA_dT = np.zeros((6, 6))
            dA_dT[0:3, 0:3] = E.rot.T
            dA_dT[3:6, 0:3] = -T.rot @ hat(E.trans)
            dA_dT[3:6, 3:6] = np.eye(3)
            dA_dE = np.zeros((6, 6))
            dA_dE[0:3, 0:3] = np.eye(3)
            dA_dE[3:6, 3:6] = T.rot
            out.append(JA @ dA_dT)
            JE += JA @ dA_dE
        return r, out + [JE]
    if f.kind == "gravprior":
        g = vals[0]
        return g - f.meas, ([-hat(g) @ gravity_basis(g)] if jac else None)
    if f.kind == "biasprior":
        r = vals[0] - f.meas
        return r, [np.eye(6)] if jac else None
    if f.kind == "preint":
        Ti, vi, Tj, vj = vals[:4]
        pre: Preintegration = f.meas
        keys = [k[0] for k in f.keys]
        bias = vals[keys.index("bias")] if "bias" in keys else None
        g = vals[keys.index("grav")] if "grav" in keys else f.extra["g"]
        T = pre.dt
        Ri = Ti.rot
        if bias is not None:
            dR, dv, dp = pre.corrected(bias[:3], bias[3:])
        else:
            dR, dv, dp = pre.dR, pre.dv, pre.dp
        e = so3_log(dR.T @ Ri.T @ Tj.rot)
        av = vj - vi - g * T
        ap = Tj.trans - Ti.trans - vi * T - 0.5 * g * T * T
        r = np.concatenate([e, Ri.T @ av - dv, Ri.T @ ap - dp])
        if not jac:
            return r, None
        Jri = right_jacobian_inv(e)
        JTi, Jvi, JTj, Jvj = np.zeros((9, 6)), np.zeros((9, 3)), np.zeros((9, 6)), np.zeros((9, 3))
        JTi[0:3, 0:3] = -Jri @ Tj.rot.T @ Ri
        JTj[0:3, 0:3] = Jri
        JTi[3:6, 0:3] = hat(Ri.T @ av)
        Jvi[3:6] = -Ri.T
        Jvj[3:6] = Ri.T
        JTi[6:9, 0:3] = hat(Ri.T @ ap)
        JTi[6:9, 3:6] = -Ri.T
        JTj[6:9, 3:6] = Ri.T
        Jvi[6:9] = -Ri.T * T
        out = [JTi, Jvi, JTj, Jvj]
        if bias is not None:
            Jb = np.zeros((9, 6))
            phi = pre.dR_dbg @ (bias[:3] - pre.bias_gyro)
            Jb[0:3, 0:3] = -Jri @ so3_exp(e).T @ right_jacobian(phi) @ pre.dR_dbg
            Jb[3:6, 0:3] = -pre.dv_dbg
            Jb[6:9, 0:3] = -pre.dp_dbg
            Jb[3:6, 3:6] = -pre.dv_dba
            Jb[6:9, 3:6] = -pre.dp_dba
            out.append(Jb)
        if "grav" in keys:
            # g <- Exp(B d) g
            dg = -hat(g) @ gravity_basis(g)
            Jg = np.zeros((9, 2))
            Jg[3:6] = -Ri.T @ dg * T
            Jg[6:9] = -0.5 * Ri.T @ dg * T * T
            out.append(Jg)
        return r, out
    if f.kind == "ego":
        Ti, vi, E = vals
        w = f.extra["w"]
        vb = Ti.rot.T @ vi
        u = vb + np.cross(w, E.trans)
        pred = E.rot.T @ u
        r = f.meas - pred
        if not jac:
            return r, None
        JT = np.zeros((3, 6))
        JT[:, 0:3] = -E.rot.T @ hat(vb)
        Jv = -E.rot.T @ Ti.rot.T
        JE = np.zeros((3, 6))
        JE[:, 0:3] = -hat(pred)
        JE[:, 3:6] = -E.rot.T @ hat(w)
        return r, [JT, Jv, JE]
    if f.kind == "rate":
        v, Ta, Tb = vals
        dt = f.meas
        r = v - (Tb.trans - Ta.trans) / dt
        if not jac:
            return r, None
        Ja, Jb = np.zeros((3, 6)), np.zeros((3, 6))
        Ja[:, 3:6] = np.eye(3) / dt
        Jb[:, 3:6] = -np.eye(3) / dt
        return r, [np.eye(3), Ja, Jb]
    raise ValueError(f"unknown factor kind {f.kind!r}")


@dataclass
class OptimizeResult:
    iterations: int
    initial_cost: float
    final_cost: float
    costs: list
    converged: bool
    flagged: bool
    cov: np.ndarray | None = None  # marginal covariance of the extrinsic when present


def optimize(graph: FactorGraph, cfg: LMConfig = LMConfig(), ext_cov: bool = False) -> OptimizeResult:
    """Levenberg-Marquardt over the graph's variables, in place.

    On failure at the damping ceiling without any accepted step the prior
    values are kept and the graph is flagged.
    """
    if not graph.factors:
        raise ValueError("graph has no factors")
    if not graph.connected():
        raise ValueError("graph is not connected")
    r, J = graph.linearize(*graph.values())
    cost = float(r @ r)
    costs = [cost]
    lam = cfg.lambda_init
    converged = False
    accepted_any = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        H = (J.T @ J).tocsc()
        g = J.T @ r
        if np.max(np.abs(g), initial=0.0) <= 1e-14 * (1.0 + cost):
            converged = True
            break
        dH = H.diagonal()
        step_ok = False
        while lam <= cfg.lambda_max:
            A = H + sp.diags(lam * np.maximum(dH, 1e-12)).tocsc()
            try:
                dx = -splu(A).solve(g)
            except RuntimeError:
                lam *= 10
                continue
            cand = graph.retract(dx)
            rc, _ = graph.linearize(*cand, jacobians=False)
            c1 = float(rc @ rc)
            if np.isfinite(c1) and c1 < cost:
                step_ok = True
                break
            lam *= 10
        if not step_ok:
            if not accepted_any and cost > 1e-12:
                graph.flagged = True
                log.warning("optimisation hit the damping ceiling; keeping prior estimate")
            converged = accepted_any or cost <= 1e-12
            break
        accepted_any = True
        graph.set_values(cand)
        rel = (cost - c1) / max(cost, 1e-300)
        cost = c1
        costs.append(cost)
        lam = max(lam / 10, 1e-12)
        if rel < cfg.rel_tol or np.linalg.norm(dx) < cfg.step_tol:
            converged = True
            break
        r, J = graph.linearize(*graph.values())
    cov = None
    if ext_cov and graph.with_extrinsic:
        r, J = graph.linearize(*graph.values())
        H = (J.T @ J).tocsc()
        o = graph._off(("ext", 0))
        E = np.zeros((graph.dim, 6))
        E[o:o + 6, :] = np.eye(6)
        cov = splu(H).solve(E)[o:o + 6, :]
        cov = 0.5 * (cov + cov.T)
    return OptimizeResult(it, costs[0], cost, costs, converged, graph.flagged, cov)


# ----------------------------------------------------------------------------- calibration


@dataclass
class CalibrationResult:
    status: str  # accepted | declined | failed
    extrinsic: RigidTransform | None
    cov: np.ndarray | None
    message: str
    yaw_rate_rms: float = 0.0


def yaw_rate_rms(kfs: list[Keyframe]) -> float:
    if not kfs:
        return 0.0
    wz = np.array([kf.gyro[2] - kf.bias_gyro[2] for kf in kfs])
    return float(np.sqrt(np.mean(wz**2)))


def calibration_graph(kfs: list[Keyframe], loops: list[LoopClosure], ext0: RigidTransform, ext_cov,
                      gravity, gcfg: GraphConfig, bias_gyro_sigma: float = 0.01,
                      bias_acc_sigma: float = 0.5, gravity_dir_sigma: float = 0.0) -> FactorGraph:
    """Poses, velocities, the extrinsic and constant IMU biases; odometry acts on sensor poses.

    With ``gravity_dir_sigma > 0`` the gravity direction is a variable as well, which absorbs a
    slight tilt of the odometry world frame instead of pushing it into the accelerometer bias.
    """
    graph = FactorGraph(with_velocity=True, with_extrinsic=True, with_bias=True, with_gravity=gravity_dir_sigma > 0)
    gravity = np.asarray(gravity, dtype=float)
    graph.gravity = gravity.copy()
    for kf in kfs:
        graph.add_pose(kf.pose, kf.vel)
    graph.ext = ext0
    graph.bias = np.concatenate([kfs[-1].bias_gyro, kfs[-1].bias_acc]).astype(float)
    _add_pose_factors(graph, kfs, loops, gcfg, sensor_frame=True, ext0=ext0)
    for a, kf in enumerate(kfs):
        if a > 0 and kf.preint is not None:
            graph.add_preint(a - 1, a, kf.preint, gravity, gcfg.preint_floor,
                             (gcfg.preint_bias_gyro_sigma, gcfg.preint_bias_acc_sigma))
        a0, a1 = max(a - 1, 0), min(a + 1, len(kfs) - 1)
        if a1 > a0:
            graph.add_rate(a, a0, a1, kfs[a1].t - kfs[a0].t, gcfg.rate_sigma)
        if kf.ego_vel is not None:
            cov = (kf.ego_cov if kf.ego_cov is not None else np.zeros((3, 3))) + gcfg.ego_sigma_floor**2 * np.eye(3)
            graph.add_ego(a, kf.ego_vel, kf.gyro - kf.bias_gyro, cov)
    graph.add_ext_prior(ext0, ext_cov)
    graph.add_bias_prior(graph.bias, bias_gyro_sigma, bias_acc_sigma)
    if graph.with_gravity:
        graph.add_gravity_prior(gravity, gravity_dir_sigma * np.linalg.norm(gravity))
    return graph


def calibrate_extrinsic_online(kfs: list[Keyframe], loops: list[LoopClosure], ext0: RigidTransform, ext_cov,
                               gravity, ccfg: CalibConfig, gcfg: GraphConfig, lm: LMConfig) -> tuple[CalibrationResult, FactorGraph | None]:
    """Joint optimisation of keyframe poses, velocities and the extrinsic."""
    if len(kfs) < ccfg.min_keyframes:
        return CalibrationResult("declined", None, None, f"only {len(kfs)} keyframes (need {ccfg.min_keyframes})"), None
    rms = yaw_rate_rms(kfs)
    if rms < ccfg.min_yaw_rate_rms:
        return CalibrationResult(
            "declined", None, None,
            f"insufficient rotational excitation: yaw-rate RMS {rms:.4f} < {ccfg.min_yaw_rate_rms} rad/s; "
            "extrinsic unobservable", rms), None
    graph = calibration_graph(kfs, loops, ext0, ext_cov, gravity, gcfg, ccfg.bias_gyro_sigma, ccfg.bias_acc_sigma,
                               ccfg.gravity_dir_sigma)
    res = optimize(graph, lm, ext_cov=True)
    if res.flagged or not graph.ext.rot.size:
        return CalibrationResult("failed", None, None, "optimisation failed", rms), graph
    return CalibrationResult("accepted", graph.ext, res.cov, f"converged in {res.iterations} iterations", rms), graph


def _add_pose_factors(graph: FactorGraph, kfs: list[Keyframe], loops: list[LoopClosure], gcfg: GraphConfig,
                      sensor_frame: bool = False, ext0: RigidTransform | None = None) -> None:
    idx = {kf.id: a for a, kf in enumerate(kfs)}
    graph.add_prior(0, kfs[0].pose, gcfg.prior_sigma, gcfg.prior_sigma)
    sr, st = math.radians(gcfg.odom_sigma_r_deg), gcfg.odom_sigma_t
    for a in range(1, len(kfs)):
        s = gcfg.odom_gate_inflation if kfs[a].odom_gated else 1.0
        if sensor_frame:
            graph.add_between_ext(a - 1, a, kfs[a].sensor_odom(kfs[a - 1]), sr * s, st * s)
        else:
            graph.add_between(a - 1, a, kfs[a].odom_rel, sr * s, st * s)
    lsr = math.radians(gcfg.loop_sigma_r_deg)
    for lc in loops:
        if sensor_frame:
            graph.add_between_ext(idx[lc.i], idx[lc.j], ext0.inverse() @ lc.rel @ ext0, lsr, gcfg.loop_sigma_t,
                                  tag="loop")
        else:
            graph.add_between(idx[lc.i], idx[lc.j], lc.rel, lsr, gcfg.loop_sigma_t, tag="loop")


# ----------------------------------------------------------------------------- driver


@dataclass
class Correction:
    transform: RigidTransform  # applied on the left of front-end world poses
    extrinsic: RigidTransform | None
    rebuild_map: bool


class Backend:
    """Synchronous back end, invoked once per front-end frame."""

    def __init__(self, policy: KeyframePolicy, loop: LoopConfig, graph: GraphConfig, lm: LMConfig,
                 calib: CalibConfig, noise: NoiseParams, loop_closure: bool = True, calibration: bool = False):
        self.policy, self.loop_cfg, self.graph_cfg, self.lm, self.calib_cfg = policy, loop, graph, lm, calib
        self.noise = noise
        self.loop_closure = loop_closure
        self.calibration_on = calibration
        self.keyframes: list[Keyframe] = []
        self.loops: list[LoopClosure] = []
        self.calibration: CalibrationResult | None = None
        self._recent = deque(maxlen=policy.cloud_scans)
        self._pre: Preintegration | None = None
        self._pre_t = None
        self._last_sample: ImuSample | None = None
        self._gated = False
        self._cooldown = 0
        self._last_calib_kf = 0
        self._gravity = np.array([0.0, 0.0, -9.81])
        self._ext = None
        self._last_front: RigidTransform | None = None

    def add_frame(self, swc, scan, gyro, imu_window, frame) -> Correction | None:
        x = swc.state
        self._gravity = x.gravity
        self._ext = x.extrinsic()
        T_wb = x.body_pose()
        self._recent.append((x.sensor_pose(), scan.xyz[scan.static_mask()].copy()))
        if frame.diag.skipped or frame.diag.diverged:
            self._gated = True
        if self._pre is not None:
            self._pre.integrate_samples(imu_window, self._last_sample, self._pre_t, swc.t, self.noise)
        self._pre_t = swc.t
        self._last_sample = imu_window[-1] if imu_window else self._last_sample

        corr = None
        if self.policy.should_key(self._last_front, T_wb):
            kf = self._make_keyframe(swc, scan, gyro)
            self.keyframes.append(kf)
            self._last_front = T_wb
            corr = self._on_keyframe(kf)
        if corr is not None:
            T_wb = corr.transform @ T_wb
        frame.anchor = self.keyframes[-1].id
        frame.rel = self._last_front.inverse() @ T_wb
        return corr

    def _make_keyframe(self, swc, scan, gyro) -> Keyframe:
        x = swc.state
        T_wb = x.body_pose()
        inv = T_wb.inverse()
        clouds = [(inv @ T_ws).apply(p) for T_ws, p in self._recent if len(p)]
        cloud = np.concatenate(clouds) if clouds else np.zeros((0, 3))
        if len(cloud):
            cloud = cloud[voxel_downsample_indices(cloud, self.policy.cloud_voxel)]
        try:
            est = estimate_ego_velocity_lsq(scan, use_labels=True)
            ego, ego_cov = est.v_s, est.cov
        except DegenerateGeometryError:
            ego, ego_cov = None, None
        kf = Keyframe(
            id=len(self.keyframes), t=swc.t, pose=T_wb,
            odom_rel=self._last_front.inverse() @ T_wb if self._last_front is not None else None,
            vel=x.vel.copy(), bias_gyro=x.bias_gyro.copy(), bias_acc=x.bias_acc.copy(),
            gyro=np.asarray(gyro, dtype=float).copy(), ego_vel=ego, ego_cov=ego_cov, cloud=cloud,
            descriptor=make_descriptor(_levelled(cloud, x.rot), self.loop_cfg),
            preint=self._pre if self.keyframes else None, odom_gated=self._gated, ext=x.extrinsic(),
        )
        self._pre = Preintegration(x.bias_gyro.copy(), x.bias_acc.copy())
        self._gated = False
        return kf

    def _on_keyframe(self, kf: Keyframe) -> Correction | None:
        need_opt = False
        if self.loop_closure and self._cooldown <= 0:
            for old_id, yaw, dist in detect_loop(kf, self.keyframes[:-1], self.loop_cfg)[:2]:
                ver = verify_loop(kf, self.keyframes, old_id, yaw, self.loop_cfg)
                if ver is not None:
                    T, rms, ratio = ver
                    self.loops.append(LoopClosure(old_id, kf.id, T, dist, rms, ratio))
                    log.info("loop closure %d -> %d (distance %.3f, rms %.3f)", old_id, kf.id, dist, rms)
                    need_opt = True
                    self._cooldown = self.loop_cfg.cooldown
                    break
        else:
            self._cooldown -= 1
        calib_due = (self.calibration_on and len(self.keyframes) - self._last_calib_kf >= self.calib_cfg.every
                     and len(self.keyframes) >= self.calib_cfg.min_keyframes)
        if not need_opt and not calib_due:
            return None
        return self._solve(calibrate=calib_due or (need_opt and self.calibration_on))

    def _solve(self, calibrate: bool) -> Correction | None:
        kfs = self.keyframes
        ext_new = None
        solved = False
        if calibrate:
            self._last_calib_kf = len(kfs)
            res, graph = calibrate_extrinsic_online(kfs, self.loops, self._ext, self._prior_cov(), self._gravity,
                                                    self.calib_cfg, self.graph_cfg, self.lm)
            self.calibration = res
            if res.status == "accepted":
                ext_new = res.extrinsic
                for kf, T, v in zip(kfs, graph.poses, graph.vels):
                    kf.pose, kf.vel = T, v
                solved = True
        if not solved:
            if not self.loops:
                return None
            graph = FactorGraph()
            for kf in kfs:
                graph.add_pose(kf.pose)
            _add_pose_factors(graph, kfs, self.loops, self.graph_cfg)
            res = optimize(graph, self.lm)
            if res.flagged:
                return None
            for kf, T in zip(kfs, graph.poses):
                kf.pose = T
        C = kfs[-1].pose @ self._last_front.inverse()
        # the front-end world now coincides with the optimised one
        self._last_front = kfs[-1].pose
        self._recent = deque(((C @ T, p) for T, p in self._recent), maxlen=self.policy.cloud_scans)
        return Correction(C, ext_new, self.graph_cfg.rebuild_map)

    def _prior_cov(self) -> np.ndarray:
        c = self.calib_cfg
        return np.diag([c.ext_prior_rot_sigma**2] * 3 + [c.ext_prior_pos_sigma**2] * 3)

    def finish(self) -> None:
        """Final calibration solve over all keyframes (corrections are not fed back)."""
        if self.calibration_on and len(self.keyframes) > self._last_calib_kf:
            self._solve(calibrate=True)
        if self.calibration_on and self.calibration is None:
            self.calibration = CalibrationResult("declined", None, None, "no calibration attempted")

    def frame_pose(self, frame) -> RigidTransform | None:
        if frame.anchor < 0 or frame.rel is None:
            return None
        return self.keyframes[frame.anchor].pose @ frame.rel

    def map_points(self) -> np.ndarray:
        idx = MapIndex(self.policy.cloud_voxel)
        for kf in self.keyframes:
            if len(kf.cloud):
                idx.insert(kf.pose.apply(kf.cloud))
        return idx.points()
