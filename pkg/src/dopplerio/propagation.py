"""IMU forward propagation of state and covariance, and backward propagation
over a scan interval.

Measurement model: the gyroscope reads body angular rate plus bias, the
accelerometer reads specific force ``R^T (a_world - g) + b_a`` in the body
frame.  One discrete step per IMU sample, driven by the earlier sample::

    R' = R Exp((w - b_g) dt)
    v' = v + (R (a - b_a) + g) dt
    p' = p + v dt + 0.5 (R (a - b_a) + g) dt^2
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import (
    BA, BG, EXT_POS, EXT_ROT, GRAV, POS, ROT, STATE_DIM, VEL,
    NavState, RigidTransform, hat, normalize_rotation, right_jacobian, so3_exp, so3_exp_batch,
)
from .sensors import ImuSample, NoiseParams

NOISE_DIM = 12  # gyro, accel, gyro bias walk, accel bias walk
SYM_TOL = 1e-9


class PropagationError(RuntimeError):
    pass


@dataclass
class StateWithCov:
    state: NavState
    cov: np.ndarray
    t: float

    def copy(self) -> "StateWithCov":
        return StateWithCov(self.state, self.cov.copy(), self.t)


@dataclass
class PropagationLog:
    """Knots and inputs of one propagation interval.

    ``gyro[k]``/``accel[k]`` drive the interval ``[times[k], times[k+1]]``.
    ``sample_t``/``sample_gyro`` hold every raw sample seen (including the one
    at the interval end) for nearest-earlier gyro lookups.
    """

    times: np.ndarray
    rot: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    sample_t: np.ndarray
    sample_gyro: np.ndarray
    end_state: NavState
    _knot_cache: dict = field(default_factory=dict, repr=False)

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def __len__(self) -> int:
        return len(self.gyro)


def imu_step(x: NavState, gyro, accel, dt: float, w=None) -> NavState:
    """One discrete propagation step; ``w`` is the optional 12-vector of noise."""
    n_g = n_a = n_bg = n_ba = np.zeros(3)
    if w is not None:
        n_g, n_a, n_bg, n_ba = w[0:3], w[3:6], w[6:9], w[9:12]
    om = gyro - x.bias_gyro - n_g
    acc_w = x.rot @ (accel - x.bias_acc - n_a) + x.gravity
    return x.with_(
        rot=normalize_rotation(x.rot @ so3_exp(om * dt)),
        pos=x.pos + x.vel * dt + 0.5 * acc_w * dt * dt,
        vel=x.vel + acc_w * dt,
        bias_gyro=x.bias_gyro + n_bg * dt,
        bias_acc=x.bias_acc + n_ba * dt,
    )


def step_jacobians(x: NavState, gyro, accel, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Error-state transition F_dx (24x24) and noise Jacobian F_w (24x12)."""
    om = gyro - x.bias_gyro
    ac = accel - x.bias_acc
    R = x.rot
    F = np.eye(STATE_DIM)
    Jr = right_jacobian(om * dt)
    F[ROT, ROT] = so3_exp(-om * dt)
    F[ROT, BG] = -Jr * dt
    RA = R @ hat(ac)
    F[POS, ROT] = -0.5 * RA * dt * dt
    F[POS, VEL] = np.eye(3) * dt
    F[POS, BA] = -0.5 * R * dt * dt
    F[POS, GRAV] = 0.5 * np.eye(3) * dt * dt
    F[VEL, ROT] = -RA * dt
    F[VEL, BA] = -R * dt
    F[VEL, GRAV] = np.eye(3) * dt
    Fw = np.zeros((STATE_DIM, NOISE_DIM))
    Fw[ROT, 0:3] = -Jr * dt
    Fw[POS, 3:6] = -0.5 * R * dt * dt
    Fw[VEL, 3:6] = -R * dt
    Fw[BG, 6:9] = np.eye(3) * dt
    Fw[BA, 9:12] = np.eye(3) * dt
    return F, Fw


def noise_cov(noise: NoiseParams, dt: float) -> np.ndarray:
    """Discrete covariance of the 12-vector w for a step of length dt."""
    d = np.repeat([noise.gyro_noise**2, noise.acc_noise**2, noise.gyro_bias_rw**2, noise.acc_bias_rw**2], 3)
    return np.diag(d / dt)


def propagate_forward(
    swc: StateWithCov,
    imu: list[ImuSample],
    noise: NoiseParams,
    last: ImuSample | None = None,
    t_end: float | None = None,
    static_noise: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> tuple[StateWithCov, PropagationLog]:
    """Propagate from ``swc.t`` through the given samples.

    Each interval is driven by the latest sample at or before its start;
    ``last`` is the final sample of the previous window.  ``static_noise``
    gives random-walk densities for (extrinsic rotation, extrinsic
    translation, gravity), zero by default.
    """
    samples = ([last] if last is not None else []) + list(imu)
    if not samples:
        raise PropagationError("no IMU samples to propagate")
    st = np.array([s.t for s in samples])
    if np.any(np.diff(st) <= 0.0):
        k = int(np.argmax(np.diff(st) <= 0.0))
        raise PropagationError(f"non-increasing IMU time: {st[k]!r} then {st[k + 1]!r}")
    t0 = swc.t
    bounds = [t0] + [t for t in st if t > t0]
    if t_end is not None and t_end > bounds[-1]:
        bounds.append(t_end)
    x = swc.state
    P = swc.cov.copy()
    K = len(bounds) - 1
    rots = np.empty((K + 1, 3, 3))
    poss = np.empty((K + 1, 3))
    vels = np.empty((K + 1, 3))
    gyr = np.empty((K, 3))
    acc = np.empty((K, 3))
    rots[0], poss[0], vels[0] = x.rot, x.pos, x.vel
    q_static = np.zeros(STATE_DIM)
    q_static[EXT_ROT], q_static[EXT_POS], q_static[GRAV] = (v * v for v in static_noise)
    for k in range(K):
        ta, tb = bounds[k], bounds[k + 1]
        dt = tb - ta
        if dt <= 0.0:
            raise PropagationError(f"non-positive step {dt!r} at t={ta!r}")
        i = max(int(np.searchsorted(st, ta, side="right")) - 1, 0)
        s = samples[i]
        F, Fw = step_jacobians(x, s.gyro, s.accel, dt)
        with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported below
            P = F @ P @ F.T + Fw @ noise_cov(noise, dt) @ Fw.T
        if q_static.any():
            P += np.diag(q_static * dt)
        x = imu_step(x, s.gyro, s.accel, dt)
        gyr[k], acc[k] = s.gyro, s.accel
        rots[k + 1], poss[k + 1], vels[k + 1] = x.rot, x.pos, x.vel
    if not (x.is_finite() and np.all(np.isfinite(P))):
        raise PropagationError(f"non-finite state or covariance after propagating to t={bounds[-1]!r}")
    asym = np.max(np.abs(P - P.T)) if P.size else 0.0
    if asym > SYM_TOL * max(1.0, np.max(np.abs(P))):
        raise PropagationError(f"covariance asymmetry {asym:.3e} beyond tolerance")
    P = 0.5 * (P + P.T)
    plog = PropagationLog(
        times=np.array(bounds), rot=rots, pos=poss, vel=vels, gyro=gyr, accel=acc,
        sample_t=st, sample_gyro=np.array([s.gyro for s in samples]), end_state=x,
    )
    return StateWithCov(x, P, bounds[-1]), plog


def _backward_knots(plog: PropagationLog, end_state: NavState):
    """Knot rotations/positions/velocities re-derived backwards from ``end_state``.

    Each backward step exactly inverts the forward discretisation with the
    earlier sample of the interval as input.
    """
    key = id(end_state)
    cached = plog._knot_cache.get(key)
    if cached is not None and cached[0] is end_state:
        return cached[1]
    K = len(plog)
    rots = np.empty((K + 1, 3, 3))
    poss = np.empty((K + 1, 3))
    vels = np.empty((K + 1, 3))
    accw = np.empty((K, 3))
    rots[K], poss[K], vels[K] = end_state.rot, end_state.pos, end_state.vel
    bg, ba, g = end_state.bias_gyro, end_state.bias_acc, end_state.gravity
    dts = np.diff(plog.times)
    for k in range(K - 1, -1, -1):
        dt = dts[k]
        R = rots[k + 1] @ so3_exp(-(plog.gyro[k] - bg) * dt)
        a = R @ (plog.accel[k] - ba) + g
        v = vels[k + 1] - a * dt
        rots[k], vels[k], accw[k] = R, v, a
        poss[k] = poss[k + 1] - v * dt - 0.5 * a * dt * dt
    out = (rots, poss, vels, accw)
    plog._knot_cache.clear()
    plog._knot_cache[key] = (end_state, out)
    return out


def _interval_index(plog: PropagationLog, t: np.ndarray) -> np.ndarray:
    eps = 1e-9
    if np.any(t < plog.start - eps) or np.any(t > plog.end + eps):
        bad = t[(t < plog.start - eps) | (t > plog.end + eps)][0]
        raise PropagationError(f"time {bad!r} outside propagation interval [{plog.start!r}, {plog.end!r}]")
    k = np.searchsorted(plog.times, t, side="right") - 1
    return np.clip(k, 0, max(len(plog) - 1, 0))


def states_at(plog: PropagationLog, times, end_state: NavState | None = None):
    """World rotation, position and velocity of the body at each time."""
    end_state = end_state or plog.end_state
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if len(plog) == 0:
        n = len(times)
        return (np.repeat(end_state.rot[None], n, 0), np.repeat(end_state.pos[None], n, 0),
                np.repeat(end_state.vel[None], n, 0))
    rots, poss, vels, accw = _backward_knots(plog, end_state)
    k = _interval_index(plog, times)
    tau = times - plog.times[k]
    om = plog.gyro[k] - end_state.bias_gyro
    R = rots[k] @ so3_exp_batch(om * tau[:, None])
    p = poss[k] + vels[k] * tau[:, None] + 0.5 * accw[k] * (tau * tau)[:, None]
    v = vels[k] + accw[k] * tau[:, None]
    at_end = times >= plog.end
    R[at_end], p[at_end], v[at_end] = end_state.rot, end_state.pos, end_state.vel
    return R, p, v


def relative_poses(plog: PropagationLog, times, end_state: NavState | None = None):
    """Rotations (N,3,3) and translations (N,3) of the body at ``times``
    expressed in the body frame at the interval end."""
    end_state = end_state or plog.end_state
    R, p, _ = states_at(plog, times, end_state)
    Re = end_state.rot
    R_rel = np.einsum("ji,njk->nik", Re, R)
    t_rel = (p - end_state.pos) @ Re
    return R_rel, t_rel


def propagate_backward(plog: PropagationLog, target_t: float, end_state: NavState | None = None) -> RigidTransform:
    """Body pose at ``target_t`` relative to the body at the interval end."""
    R, t = relative_poses(plog, [target_t], end_state)
    return RigidTransform(R[0], t[0])


def gyro_at(plog: PropagationLog, times) -> np.ndarray:
    """Raw gyro of the latest sample at or before each time."""
    if len(plog.sample_t) == 0:
        raise PropagationError("empty propagation log")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    i = np.searchsorted(plog.sample_t, times + 1e-12, side="right") - 1
    return plog.sample_gyro[np.clip(i, 0, len(plog.sample_t) - 1)]


def sensor_velocity(state: NavState, gyro, rot=None, vel=None) -> np.ndarray:
    """Velocity of the sensor origin in the sensor frame.

    Vectorised over leading axes of ``gyro``/``rot``/``vel`` when given.
    """
    rot = state.rot if rot is None else rot
    vel = state.vel if vel is None else vel
    vb = np.einsum("...ji,...j->...i", rot, vel)
    w = np.asarray(gyro) - state.bias_gyro
    u = vb + np.cross(w, state.ext_pos)
    return u @ state.ext_rot


def predicted_velocity_at(plog: PropagationLog, state: NavState, t) -> np.ndarray:
    """Sensor-frame velocity at time(s) t, with ``state`` the interval-end state."""
    scalar = np.ndim(t) == 0
    times, inv = np.unique(np.atleast_1d(np.asarray(t, dtype=float)), return_inverse=True)
    R, _, v = states_at(plog, times, state)
    out = sensor_velocity(state, gyro_at(plog, times), R, v)[inv]
    return out[0] if scalar else out
