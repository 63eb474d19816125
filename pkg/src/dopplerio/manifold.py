"""Rotation group and composite-state algebra.

Rotations are stored as 3x3 numpy arrays (orthonormal, det +1).  Error states
use the *right* perturbation convention everywhere::

    R_perturbed = R @ so3_exp(delta)

The 24-dimensional error-state layout shared by every module is::

    [0:3]   rotation of the body in the world
    [3:6]   position of the body in the world
    [6:9]   rotation of the extrinsic (sensor -> body)
    [9:12]  translation of the extrinsic (sensor origin in the body frame)
    [12:15] world-frame velocity
    [15:18] gyroscope bias
    [18:21] accelerometer bias
    [21:24] gravity vector (world frame, free 3-vector)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SMALL_ANGLE = 1e-7
STATE_DIM = 24

ROT = slice(0, 3)
POS = slice(3, 6)
EXT_ROT = slice(6, 9)
EXT_POS = slice(9, 12)
VEL = slice(12, 15)
BG = slice(15, 18)
BA = slice(18, 21)
GRAV = slice(21, 24)


def hat(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    K = hat(phi)
    if theta2 < SMALL_ANGLE**2:
        return np.eye(3) + K + 0.5 * K @ K
    theta = np.sqrt(theta2)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * K @ K


def so3_exp_batch(phis: np.ndarray) -> np.ndarray:
    """Vectorised exponential map for an (N, 3) array of rotation vectors."""
    phis = np.asarray(phis, dtype=float).reshape(-1, 3)
    theta2 = np.einsum("ij,ij->i", phis, phis)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    K = np.zeros((len(phis), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -phis[:, 2], phis[:, 1]
    K[:, 1, 0], K[:, 1, 2] = phis[:, 2], -phis[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -phis[:, 1], phis[:, 0]
    KK = K @ K
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * KK


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z) with w >= 0."""
    m = R
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return q if q[0] >= 0.0 else -q


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def so3_log(R: np.ndarray) -> np.ndarray:
    # quaternion route stays accurate near both 0 and pi
    q = rot_to_quat(R)
    v = q[1:]
    n = np.linalg.norm(v)
    if n < SMALL_ANGLE:
        return 2.0 * v / q[0]
    theta = 2.0 * np.arctan2(n, q[0])
    return theta * v / n


def right_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    t2 = theta * theta
    return np.eye(3) - (1 - np.cos(theta)) / t2 * K + (theta - np.sin(theta)) / (t2 * theta) * K @ K


def right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    t2 = theta * theta
    c = 1.0 / t2 - (1 + np.cos(theta)) / (2 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + c * K @ K


def normalize_rotation(R: np.ndarray) -> np.ndarray:
    """One Newton step towards the nearest orthonormal matrix.

    Applied after every composition; drift after 1e5 chained products stays
    below 1e-12 in ||R^T R - I||.
    """
    return 0.5 * R @ (3.0 * np.eye(3) - R.T @ R)


@dataclass(frozen=True)
class RigidTransform:
    """Maps points from frame B into frame A: p_A = rot @ p_B + trans."""

    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(normalize_rotation(self.rot @ other.rot), self.rot @ other.trans + self.trans)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rot.T, -self.rot.T @ self.trans)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if pts.ndim == 1:
            return self.rot @ pts + self.trans
        return pts @ self.rot.T + self.trans

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3], T[:3, 3] = self.rot, self.trans
        return T


@dataclass(frozen=True)
class NavState:
    """Full navigation state.

    ``ext_rot``/``ext_pos`` give the sensor frame's pose in the body (IMU)
    frame, so a sensor point maps to the body as ``ext_rot @ m + ext_pos``.
    """

    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ext_rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    ext_pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_acc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def body_pose(self) -> RigidTransform:
        return RigidTransform(self.rot, self.pos)

    def extrinsic(self) -> RigidTransform:
        return RigidTransform(self.ext_rot, self.ext_pos)

    def sensor_pose(self) -> RigidTransform:
        return self.body_pose() @ self.extrinsic()

    def with_(self, **kw) -> "NavState":
        return replace(self, **kw)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, f))) for f in self.__dataclass_fields__)


def boxplus(x: NavState, d: np.ndarray) -> NavState:
    d = np.asarray(d, dtype=float)
    if d.shape != (STATE_DIM,) or not np.all(np.isfinite(d)):
        raise ValueError("state delta must be a finite 24-vector")
    return NavState(
        rot=normalize_rotation(x.rot @ so3_exp(d[ROT])),
        pos=x.pos + d[POS],
        ext_rot=normalize_rotation(x.ext_rot @ so3_exp(d[EXT_ROT])),
        ext_pos=x.ext_pos + d[EXT_POS],
        vel=x.vel + d[VEL],
        bias_gyro=x.bias_gyro + d[BG],
        bias_acc=x.bias_acc + d[BA],
        gravity=x.gravity + d[GRAV],
    )


def boxminus(a: NavState, b: NavState) -> np.ndarray:
    """Tangent vector d such that boxplus(b, d) == a."""
    d = np.empty(STATE_DIM)
    d[ROT] = so3_log(b.rot.T @ a.rot)
    d[POS] = a.pos - b.pos
    d[EXT_ROT] = so3_log(b.ext_rot.T @ a.ext_rot)
    d[EXT_POS] = a.ext_pos - b.ext_pos
    d[VEL] = a.vel - b.vel
    d[BG] = a.bias_gyro - b.bias_gyro
    d[BA] = a.bias_acc - b.bias_acc
    d[GRAV] = a.gravity - b.gravity
    return d


def yaw_rotation(yaw: float) -> np.ndarray:
    return so3_exp(np.array([0.0, 0.0, yaw]))
