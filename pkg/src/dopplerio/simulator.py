"""Deterministic synthesis of trajectories and IMU / radar / FMCW-LiDAR logs.

IMU readings are interval increments: sample k reports the constant rate and
specific force that carry the true pose and velocity exactly from t_k to
t_{k+1} under the propagation step.  Surfaces are sampled as uniform random
points each scan (no occlusion).  A point is labelled dynamic iff it was
drawn from an actor or injected as an outlier.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .manifold import quat_to_rot, rot_to_quat, so3_exp, so3_log, yaw_rotation
from .metrics import Trajectory as TumTrajectory, write_tum
from .sensors import ImuSample, Label, LogMeta, NoiseParams, Scan, SensorKind, scan_filename, write_log


LIDAR_COLUMNS = 100


class ScenarioError(ValueError):
    pass


# ----------------------------------------------------------------------------- scenario description


@dataclass
class TrajectorySpec:
    start: tuple = (0.0, 0.0, 0.0)
    heading_deg: float = 0.0
    speed_knots: list = field(default_factory=lambda: [[0.0, 0.0]])  # [[t, v], ...] linear in t
    segments: list = field(default_factory=list)  # {"type": "straight"|"arc", "length"/"radius"+"angle_deg"}
    roll_amp_deg: float = 0.0
    pitch_amp_deg: float = 0.0
    wobble_hz: float = 0.0


@dataclass
class WorldSpec:
    ground_margin: float = 100.0
    tile: float = 20.0
    ground_weight: float = 0.15
    boxes: list = field(default_factory=list)  # [cx, cy, sx, sy, height, yaw_deg]
    city: dict = field(default_factory=dict)  # {"spacing", "corridor", "min_size", "max_size", "max_height", "fill"}
    walls: list = field(default_factory=list)  # [x0, y0, x1, y1, height]
    scatter: list = field(default_factory=list)  # [x, y, z, radius]


@dataclass
class ActorSpec:
    center: tuple = (0.0, 0.0)  # box centre at t = 0
    size: tuple = (10.0, 2.5, 3.0)  # length, width, height
    velocity: tuple = (0.0, 0.0)
    points: int = 100


@dataclass
class SensorSpec:
    kind: str = "radar"
    rate_hz: float = 10.0
    scan_period: float = 0.1
    fov_az_deg: float = 120.0
    fov_el_deg: float = 30.0
    max_range: float = 80.0
    min_range: float = 1.0
    points_per_scan: int = 400
    ext_rpy_deg: tuple = (0.0, 0.0, 0.0)
    ext_pos: tuple = (0.0, 0.0, 0.0)
    meta_ext_rpy_deg: tuple | None = None  # extrinsic written to meta (defaults to truth)
    meta_ext_pos: tuple | None = None
    outlier_fraction: float = 0.0


@dataclass
class ImuSpec:
    rate_hz: float = 100.0
    bias_gyro: tuple = (0.0, 0.0, 0.0)
    bias_acc: tuple = (0.0, 0.0, 0.0)


@dataclass
class SimScenario:
    name: str = "custom"
    seed: int = 0
    duration: float = 10.0
    gravity: float = 9.81
    noise_scale: float = 1.0  # 0 -> noiseless IMU, points and dopplers, no bias walk
    noise: NoiseParams = field(default_factory=NoiseParams)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    world: WorldSpec = field(default_factory=WorldSpec)
    actors: list = field(default_factory=list)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    imu: ImuSpec = field(default_factory=ImuSpec)

    def noiseless(self) -> "SimScenario":
        s = copy.deepcopy(self)
        s.noise_scale = 0.0
        # the log's metadata then advertises a correspondingly small noise
        s.noise = NoiseParams(gyro_noise=1e-5, acc_noise=1e-4, gyro_bias_rw=1e-7, acc_bias_rw=1e-6,
                              point_sigma=1e-3, doppler_sigma=1e-3)
        s.imu.bias_gyro = (0.0, 0.0, 0.0)
        s.imu.bias_acc = (0.0, 0.0, 0.0)
        s.sensor.outlier_fraction = 0.0
        return s

    def replace(self, **kw) -> "SimScenario":
        s = copy.deepcopy(self)
        for k, v in kw.items():
            setattr(s, k, v)
        return s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = dict(self.noise.__dict__)
        return _strip_none(d)

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        d = dict(d)
        return cls(
            name=d.get("name", "custom"), seed=int(d.get("seed", 0)), duration=float(d.get("duration", 10.0)),
            gravity=float(d.get("gravity", 9.81)), noise_scale=float(d.get("noise_scale", 1.0)),
            noise=NoiseParams(**d.get("noise", {})),
            trajectory=TrajectorySpec(**d.get("trajectory", {})), world=WorldSpec(**d.get("world", {})),
            actors=[ActorSpec(**a) for a in d.get("actors", [])], sensor=SensorSpec(**d.get("sensor", {})),
            imu=ImuSpec(**d.get("imu", {})),
        )

    def save(self, path) -> None:
        with open(path, "wb") as f:
            tomli_w.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "SimScenario":
        with open(path, "rb") as f:
            return cls.from_dict(tomli.load(f))

    def validate(self) -> None:
        if self.sensor.rate_hz <= 0 or self.imu.rate_hz <= 0:
            raise ScenarioError("rates must be > 0")
        if self.duration <= 0:
            raise ScenarioError("duration must be > 0")
        imu_ns, scan_ns = _period_ns(self.imu.rate_hz), _period_ns(self.sensor.rate_hz)
        if scan_ns % imu_ns:
            raise ScenarioError("scan period must be a multiple of the IMU period")
        if self.sensor.kind == "radar" and self.sensor.scan_period != 0.0:
            pass  # radar frames are instantaneous; scan_period only bounds offsets
        knots = np.asarray(self.trajectory.speed_knots, dtype=float).reshape(-1, 2)
        if np.any(np.diff(knots[:, 0]) <= 0):
            raise ScenarioError("speed profile discontinuity: knot times must be strictly increasing")
        if np.any(knots[:, 1] < 0):
            raise ScenarioError("speeds must be >= 0")
        for seg in self.trajectory.segments:
            if seg.get("type") not in ("straight", "arc"):
                raise ScenarioError(f"unknown segment type {seg.get('type')!r}")


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, (list, tuple)):
        return [_strip_none(v) for v in d]
    return d


def _period_ns(rate: float) -> int:
    return int(round(1e9 / rate))


def rpy_to_rot(rpy_deg) -> np.ndarray:
    r, p, y = np.radians(rpy_deg)
    return so3_exp([0, 0, y]) @ so3_exp([0, p, 0]) @ so3_exp([r, 0, 0])


# ----------------------------------------------------------------------------- trajectory


class Trajectory:
    """Analytic body trajectory: planar path, speed profile, roll/pitch wobble."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        knots = np.asarray(spec.speed_knots, dtype=float).reshape(-1, 2)
        self.kt, self.kv = knots[:, 0], knots[:, 1]
        # arc length at each knot
        self.ks = np.concatenate([[0.0], np.cumsum(np.diff(self.kt) * 0.5 * (self.kv[1:] + self.kv[:-1]))])
        # path segments: (s0, length, curvature, x0, y0, heading0)
        segs = []
        x, y, h = spec.start[0], spec.start[1], math.radians(spec.heading_deg)
        s = 0.0
        for seg in spec.segments:
            if seg["type"] == "straight":
                L, k = float(seg["length"]), 0.0
            else:
                R = float(seg["radius"])
                ang = math.radians(float(seg["angle_deg"]))
                L, k = R * abs(ang), math.copysign(1.0 / R, ang)
            segs.append((s, L, k, x, y, h))
            x, y, h = self._seg_eval(x, y, h, k, L)
            s += L
        segs.append((s, math.inf, 0.0, x, y, h))
        self.segs = segs
        self.z0 = float(spec.start[2])

    @staticmethod
    def _seg_eval(x, y, h, k, ds):
        if k == 0.0:
            return x + ds * math.cos(h), y + ds * math.sin(h), h
        h1 = h + k * ds
        return x + (math.sin(h1) - math.sin(h)) / k, y - (math.cos(h1) - math.cos(h)) / k, h1

    def speed(self, t: float) -> tuple[float, float, float]:
        """(s, v, a) at time t."""
        kt, kv, ks = self.kt, self.kv, self.ks
        if t <= kt[0]:
            return kv[0] * (t - kt[0]), kv[0], 0.0
        if t >= kt[-1]:
            return ks[-1] + kv[-1] * (t - kt[-1]), kv[-1], 0.0
        i = int(np.searchsorted(kt, t, side="right")) - 1
        dt = t - kt[i]
        a = (kv[i + 1] - kv[i]) / (kt[i + 1] - kt[i])
        return ks[i] + kv[i] * dt + 0.5 * a * dt * dt, kv[i] + a * dt, a

    def path(self, s: float):
        """(x, y, heading, curvature) at arc length s."""
        i = 0
        for j, seg in enumerate(self.segs):
            if s >= seg[0]:
                i = j
        s0, L, k, x, y, h = self.segs[i]
        x1, y1, h1 = self._seg_eval(x, y, h, k, s - s0)
        return x1, y1, h1, k

    def state(self, t: float):
        """Body rotation, position, world velocity, body angular rate."""
        s, v, a = self.speed(t)
        x, y, yaw, k = self.path(s)
        sp = self.spec
        w = 2 * math.pi * sp.wobble_hz
        ra, pa = math.radians(sp.roll_amp_deg), math.radians(sp.pitch_amp_deg)
        roll, droll = ra * math.sin(w * t), ra * w * math.cos(w * t)
        pitch, dpitch = pa * math.sin(w * t + 1.0), pa * w * math.cos(w * t + 1.0)
        dyaw = k * v
        Rz, Ry, Rx = so3_exp([0, 0, yaw]), so3_exp([0, pitch, 0]), so3_exp([roll, 0, 0])
        R = Rz @ Ry @ Rx
        omega = Rx.T @ Ry.T @ np.array([0, 0, dyaw]) + Rx.T @ np.array([0, dpitch, 0]) + np.array([droll, 0, 0])
        pos = np.array([x, y, self.z0])
        vel = v * np.array([math.cos(yaw), math.sin(yaw), 0.0])
        return R, pos, vel, omega

    def polyline(self, t_end: float, step: float = 1.0) -> np.ndarray:
        s_end = self.speed(t_end)[0]
        ss = np.arange(0.0, max(s_end, 0.0) + step, step)
        return np.array([self.path(s)[:2] for s in ss])


# ----------------------------------------------------------------------------- world


@dataclass
class Rect:
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    weight: float = 1.0

    @property
    def area(self) -> float:
        return float(np.linalg.norm(self.e1) * np.linalg.norm(self.e2))

    @property
    def center(self) -> np.ndarray:
        return self.origin + 0.5 * (self.e1 + self.e2)

    @property
    def radius(self) -> float:
        return 0.5 * float(np.linalg.norm(self.e1 + self.e2))


def box_rects(cx, cy, sx, sy, h, yaw_deg=0.0, weight=1.0, z0=0.0) -> list[Rect]:
    R = so3_exp([0, 0, math.radians(yaw_deg)])
    ex, ey, ez = R[:, 0] * sx, R[:, 1] * sy, np.array([0, 0, h])
    c0 = np.array([cx, cy, z0]) - 0.5 * ex - 0.5 * ey
    return [
        Rect(c0, ex, ez, weight), Rect(c0, ey, ez, weight),
        Rect(c0 + ey, ex, ez, weight), Rect(c0 + ex, ey, ez, weight),
        Rect(c0 + ez, ex, ey, weight),
    ]


class World:
    def __init__(self, spec: WorldSpec, traj: Trajectory, duration: float, rng: np.random.Generator):
        self.rects: list[Rect] = []
        poly = traj.polyline(duration)
        lo, hi = poly.min(axis=0) - spec.ground_margin, poly.max(axis=0) + spec.ground_margin
        tile = spec.tile
        for x in np.arange(lo[0], hi[0], tile):
            for y in np.arange(lo[1], hi[1], tile):
                self.rects.append(Rect(np.array([x, y, 0.0]), np.array([tile, 0, 0]), np.array([0, tile, 0]),
                                       spec.ground_weight))
        boxes = [list(b) for b in spec.boxes]
        if spec.city:
            boxes += _city_boxes(spec.city, poly, lo, hi, rng)
        for b in boxes:
            self.rects += box_rects(*b)
        for x0, y0, x1, y1, h in spec.walls:
            a, b = np.array([x0, y0, 0.0]), np.array([x1, y1, 0.0])
            # long walls are split so the range pre-filter stays tight
            n = max(1, int(math.ceil(np.linalg.norm(b - a) / tile)))
            for i in range(n):
                p0 = a + (b - a) * i / n
                self.rects.append(Rect(p0, (b - a) / n, np.array([0, 0, h])))
        self.scatter = np.asarray(spec.scatter, dtype=float).reshape(-1, 4)
        self.centers = np.array([r.center for r in self.rects])
        self.radii = np.array([r.radius for r in self.rects])
        self.boxes = boxes


def _city_boxes(city: dict, poly, lo, hi, rng) -> list:
    spacing = float(city.get("spacing", 25.0))
    corridor = float(city.get("corridor", 6.0))
    smin, smax = float(city.get("min_size", 4.0)), float(city.get("max_size", 14.0))
    hmax = float(city.get("max_height", 12.0))
    fill = float(city.get("fill", 0.8))
    out = []
    for x in np.arange(lo[0], hi[0], spacing):
        for y in np.arange(lo[1], hi[1], spacing):
            u = rng.random(6)
            if u[0] > fill:
                continue
            cx, cy = x + (u[1] - 0.5) * spacing * 0.4, y + (u[2] - 0.5) * spacing * 0.4
            sx, sy = smin + u[3] * (smax - smin), smin + u[4] * (smax - smin)
            h = 3.0 + u[5] * (hmax - 3.0)
            yaw = float(rng.uniform(-30, 30))
            half = 0.5 * math.hypot(sx, sy)
            if np.min(np.hypot(poly[:, 0] - cx, poly[:, 1] - cy)) < half + corridor:
                continue
            out.append([float(cx), float(cy), float(sx), float(sy), float(h), yaw])
    return out


# ----------------------------------------------------------------------------- sensing


@dataclass
class GroundTruth:
    times: np.ndarray
    rot: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    ext_rot: np.ndarray
    ext_pos: np.ndarray
    scan_times: np.ndarray
    labels: list  # per scan int8 arrays (1 static, 2 dynamic)
    ref_xyz: list  # per scan reference points, sensor frame at scan end, noise-free
    ref_doppler: list
    sensor_vel: np.ndarray  # true sensor-frame velocity at each scan end
    bias_gyro: np.ndarray
    bias_acc: np.ndarray
    gravity: np.ndarray

    def pose_at(self, t: float):
        i = int(np.argmin(np.abs(self.times - t)))
        return self.rot[i], self.pos[i]


@dataclass
class SimResult:
    scenario: SimScenario
    imu: list
    scans: list
    meta: LogMeta
    truth: GroundTruth
    trajectory: Trajectory
    world: World
    path: Path | None = None


def _sample_static(world: World, T_ws_R, T_ws_p, n_want, sensor: SensorSpec, rng, rounds=30):
    """World points on static surfaces visible from the sensor pose."""
    near = np.linalg.norm(world.centers - T_ws_p, axis=1) - world.radii < sensor.max_range
    idx = np.flatnonzero(near)
    got = np.zeros((0, 3))
    if len(idx) == 0 or n_want <= 0:
        return got
    w = np.array([world.rects[i].area * world.rects[i].weight for i in idx])
    w = w / w.sum()
    origins = np.array([world.rects[i].origin for i in idx])
    e1 = np.array([world.rects[i].e1 for i in idx])
    e2 = np.array([world.rects[i].e2 for i in idx])
    batch = max(4 * n_want, 256)
    for _ in range(rounds):
        pick = rng.choice(len(idx), size=batch, p=w)
        ab = rng.random((batch, 2))
        pts = origins[pick] + ab[:, :1] * e1[pick] + ab[:, 1:] * e2[pick]
        m = (pts - T_ws_p) @ T_ws_R
        pts = pts[_visible(m, sensor)]
        got = np.concatenate([got, pts])
        if len(got) >= n_want:
            break
    return got[:n_want]


def _visible(m: np.ndarray, sensor: SensorSpec) -> np.ndarray:
    r = np.linalg.norm(m, axis=1)
    az = np.degrees(np.arctan2(m[:, 1], m[:, 0]))
    el = np.degrees(np.arcsin(np.clip(m[:, 2] / np.maximum(r, 1e-12), -1, 1)))
    return ((r >= sensor.min_range) & (r <= sensor.max_range) & (np.abs(az) <= sensor.fov_az_deg / 2)
            & (np.abs(el) <= sensor.fov_el_deg / 2))


def _actor_local(actor: ActorSpec, n: int, rng) -> np.ndarray:
    L, W, H = actor.size
    rects = box_rects(0.0, 0.0, L, W, H)
    areas = np.array([r.area for r in rects])
    pick = rng.choice(len(rects), size=n, p=areas / areas.sum())
    ab = rng.random((n, 2))
    return np.array([rects[i].origin + a * rects[i].e1 + b * rects[i].e2 for i, (a, b) in zip(pick, ab)]).reshape(-1, 3)


def simulate(scenario: SimScenario, out_dir=None) -> SimResult:
    scenario.validate()
    rng = np.random.default_rng(scenario.seed)
    ns = scenario.noise_scale
    noise = scenario.noise
    traj = Trajectory(scenario.trajectory)
    world = World(scenario.world, traj, scenario.duration, rng)
    g = np.array([0.0, 0.0, -scenario.gravity])
    sen = scenario.sensor
    R_sb, p_sb = rpy_to_rot(sen.ext_rpy_deg), np.array(sen.ext_pos, dtype=float)

    # ---- IMU on an integer-nanosecond grid
    imu_ns = _period_ns(scenario.imu.rate_hz)
    n_imu = int(round(scenario.duration * 1e9)) // imu_ns + 1
    times = np.array([k * imu_ns for k in range(n_imu + 1)]) / 1e9
    states = [traj.state(t) for t in times]
    rot = np.array([s[0] for s in states])
    pos = np.array([s[1] for s in states])
    vel = np.array([s[2] for s in states])
    dt = imu_ns / 1e9
    bg = np.array(scenario.imu.bias_gyro, dtype=float) * (ns > 0)
    ba = np.array(scenario.imu.bias_acc, dtype=float) * (ns > 0)
    imu, bgs, bas = [], [], []
    for k in range(n_imu):
        gyro = so3_log(rot[k].T @ rot[k + 1]) / dt
        acc = rot[k].T @ ((vel[k + 1] - vel[k]) / dt - g)
        if ns > 0:
            gyro = gyro + bg + rng.normal(0, ns * noise.gyro_noise / math.sqrt(dt), 3)
            acc = acc + ba + rng.normal(0, ns * noise.acc_noise / math.sqrt(dt), 3)
        else:
            gyro, acc = gyro + bg, acc + ba
        bgs.append(bg.copy())
        bas.append(ba.copy())
        imu.append(ImuSample(float(times[k]), gyro, acc))
        if ns > 0:
            bg = bg + rng.normal(0, ns * noise.gyro_bias_rw * math.sqrt(dt), 3)
            ba = ba + rng.normal(0, ns * noise.acc_bias_rw * math.sqrt(dt), 3)

    # ---- scans
    scan_ns = _period_ns(sen.rate_hz)
    kind = SensorKind(sen.kind)
    scan_times = []
    k = 1
    while k * scan_ns <= (n_imu - 1) * imu_ns:
        scan_times.append(k * scan_ns / 1e9)
        k += 1
    scans, labels, refs, ref_dops, svel = [], [], [], [], []
    actors = [a for a in scenario.actors]
    for te in scan_times:
        scan, lab, ref, rdop, vs_end = _make_scan(te, kind, sen, traj, world, actors, R_sb, p_sb, noise, ns, rng)
        scans.append(scan)
        labels.append(lab)
        refs.append(ref)
        ref_dops.append(rdop)
        svel.append(vs_end)

    meta_R = rpy_to_rot(sen.meta_ext_rpy_deg) if sen.meta_ext_rpy_deg is not None else R_sb
    meta_p = np.array(sen.meta_ext_pos, dtype=float) if sen.meta_ext_pos is not None else p_sb
    meta = LogMeta.from_extrinsic(kind, sen.scan_period if kind == SensorKind.FMCW_LIDAR else 1.0 / sen.rate_hz,
                                  meta_R, meta_p, noise, scenario.gravity)
    truth = GroundTruth(
        times=times[:n_imu], rot=rot[:n_imu], pos=pos[:n_imu], vel=vel[:n_imu], ext_rot=R_sb, ext_pos=p_sb,
        scan_times=np.array(scan_times), labels=labels, ref_xyz=refs, ref_doppler=ref_dops,
        sensor_vel=np.array(svel).reshape(-1, 3), bias_gyro=np.array(bgs), bias_acc=np.array(bas), gravity=g,
    )
    res = SimResult(scenario, imu, scans, meta, truth, traj, world)
    if out_dir is not None:
        res.path = write_simulation(res, out_dir)
    return res


def true_sensor_velocity(traj: Trajectory, t: float, R_sb, p_sb) -> np.ndarray:
    R, _, v, om = traj.state(t)
    return R_sb.T @ (R.T @ v + np.cross(om, p_sb))


def _make_scan(te, kind, sen: SensorSpec, traj, world, actors, R_sb, p_sb, noise, ns, rng):
    n_dyn_want = [a.points for a in actors]
    period = sen.scan_period if kind == SensorKind.FMCW_LIDAR else 0.0
    t_mid = te - 0.5 * period
    Rm, pm, _, _ = traj.state(t_mid)
    Rws_m, pws_m = Rm @ R_sb, Rm @ p_sb + pm

    n_static = sen.points_per_scan
    static_w = _sample_static(world, Rws_m, pws_m, n_static, sen, rng)
    # candidates: (local point, actor index or -1)
    cand_local = [static_w]
    cand_actor = [np.full(len(static_w), -1)]
    for ai, a in enumerate(actors):
        if n_dyn_want[ai] <= 0:
            continue
        c = np.array([a.center[0] + a.velocity[0] * t_mid, a.center[1] + a.velocity[1] * t_mid, 0.0])
        loc = _actor_local(a, 6 * n_dyn_want[ai], rng)
        vis = _visible((loc + c - pws_m) @ Rws_m, sen)
        loc = loc[vis][: n_dyn_want[ai]]
        cand_local.append(loc)
        cand_actor.append(np.full(len(loc), ai))
    local = np.concatenate(cand_local)
    actor_id = np.concatenate(cand_actor)
    n = len(local)

    # sampling times: LiDAR sweeps azimuth left to right across the period
    if period > 0 and n > 0:
        mid_world = local.copy()
        for ai, a in enumerate(actors):
            m_ = actor_id == ai
            mid_world[m_] += np.array([a.center[0] + a.velocity[0] * t_mid, a.center[1] + a.velocity[1] * t_mid, 0.0])
        mm = (mid_world - pws_m) @ Rws_m
        az = np.arctan2(mm[:, 1], mm[:, 0])
        order = np.argsort(-az, kind="stable")
        local, actor_id = local[order], actor_id[order]
        # points fire in azimuth columns; each column shares one timestamp
        col = (np.arange(n) * LIDAR_COLUMNS) // n
        offsets = -period + period * (col + 1) / LIDAR_COLUMNS
        offsets[col == LIDAR_COLUMNS - 1] = 0.0
    else:
        offsets = np.zeros(n)

    xyz = np.zeros((n, 3))
    dop = np.zeros(n)
    Re, pe, ve, oe = traj.state(te)
    Rws_e, pws_e = Re @ R_sb, Re @ p_sb + pe
    vs_e = R_sb.T @ (Re.T @ ve + np.cross(oe, p_sb))
    world_pts = local.copy()
    v_tgt = np.zeros((n, 3))
    for t_off in np.unique(offsets):
        sel = offsets == t_off
        t = te + t_off
        R, p, v, om = traj.state(t)
        Rws, pws = R @ R_sb, R @ p_sb + p
        vs = R_sb.T @ (R.T @ v + np.cross(om, p_sb))
        for ai, a in enumerate(actors):
            m_ = sel & (actor_id == ai)
            world_pts[m_] += np.array([a.center[0] + a.velocity[0] * t, a.center[1] + a.velocity[1] * t, 0.0])
            v_tgt[m_] = [a.velocity[0], a.velocity[1], 0.0]
        m = (world_pts[sel] - pws) @ Rws
        r = m / np.linalg.norm(m, axis=1, keepdims=True)
        dop[sel] = np.einsum("ij,ij->i", r, v_tgt[sel] @ Rws - vs)
        xyz[sel] = m
    ref = (world_pts - pws_e) @ Rws_e
    rr = ref / np.maximum(np.linalg.norm(ref, axis=1, keepdims=True), 1e-12)
    rdop = np.einsum("ij,ij->i", rr, v_tgt @ Rws_e - vs_e)
    labels = np.where(actor_id >= 0, Label.DYNAMIC, Label.STATIC).astype(np.int8)

    if sen.outlier_fraction > 0 and n > 0:
        k = int(round(sen.outlier_fraction * n))
        idx = rng.choice(n, size=k, replace=False)
        for j in idx:
            rr = rng.uniform(sen.min_range + 1, sen.max_range * 0.8)
            az = math.radians(rng.uniform(-sen.fov_az_deg / 2, sen.fov_az_deg / 2))
            el = math.radians(rng.uniform(-sen.fov_el_deg / 2, sen.fov_el_deg / 2))
            xyz[j] = rr * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
            ref[j] = xyz[j]
            dop[j] = rdop[j] = rng.uniform(-20, 20)
            labels[j] = Label.DYNAMIC

    if ns > 0 and n > 0:
        xyz = xyz + rng.normal(0, ns * noise.point_sigma, (n, 3))
        dop = dop + rng.normal(0, ns * noise.doppler_sigma, n)
    scan = Scan.from_arrays(te, kind, xyz, dop, offset_t=offsets, intensity=np.zeros(n))
    return scan, labels, ref, rdop, vs_e


# ----------------------------------------------------------------------------- output


def truth_in_odometry_frame(truth: GroundTruth, t0: float) -> TumTrajectory:
    """Ground truth re-expressed in the frame the odometry starts in: origin at the
    body at ``t0``, gravity-aligned, yaw zeroed."""
    i0 = int(np.argmin(np.abs(truth.times - t0)))
    R = truth.rot[i0]
    R0 = yaw_rotation(-math.atan2(R[1, 0], R[0, 0]))
    return TumTrajectory(truth.times.copy(), (truth.pos - truth.pos[i0]) @ R0.T, np.einsum("ij,njk->nik", R0, truth.rot))


def write_simulation(res: SimResult, out_dir) -> Path:
    out = Path(out_dir)
    write_log(out, res.imu, res.scans, res.meta)
    tr = res.truth
    with open(out / "gt_trajectory.csv", "w") as f:
        f.write("t,x,y,z,qw,qx,qy,qz,vx,vy,vz\n")
        for t, R, p, v in zip(tr.times, tr.rot, tr.pos, tr.vel):
            q = rot_to_quat(R)
            f.write(",".join(repr(float(x)) for x in (t, *p, *q, *v)) + "\n")
    if len(tr.scan_times):
        gt = truth_in_odometry_frame(tr, float(tr.scan_times[0]))
        write_tum(out / "gt_trajectory.tum", gt.times, gt.pos, gt.rot)
    (out / "gt_labels").mkdir(exist_ok=True)
    for i, scan in enumerate(res.scans):
        with open(out / "gt_labels" / scan_filename(i, scan.end_time), "w") as f:
            f.write("label,ref_x,ref_y,ref_z,ref_doppler\n")
            for lab, p, d in zip(tr.labels[i], tr.ref_xyz[i], tr.ref_doppler[i]):
                f.write(f"{int(lab)},{float(p[0])!r},{float(p[1])!r},{float(p[2])!r},{float(d)!r}\n")
    with open(out / "gt_extrinsic.toml", "wb") as f:
        tomli_w.dump({"quat_wxyz": [float(v) for v in rot_to_quat(tr.ext_rot)],
                      "pos": [float(v) for v in tr.ext_pos]}, f)
    res.scenario.save(out / "scenario.toml")
    return out


def read_gt_trajectory(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(times, positions, rotations) from a gt_trajectory.csv."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    rots = np.array([quat_to_rot(q) for q in arr[:, 4:8]])
    return arr[:, 0], arr[:, 1:4], rots


def read_gt_extrinsic(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        d = tomli.load(f)
    return quat_to_rot(d["quat_wxyz"]), np.array(d["pos"], dtype=float)


# ----------------------------------------------------------------------------- library


def scenario_library() -> dict[str, SimScenario]:
    radar = dict(kind="radar", rate_hz=10.0, scan_period=0.1, fov_az_deg=120.0, fov_el_deg=30.0,
                 max_range=60.0, points_per_scan=400, ext_rpy_deg=(0.0, 0.0, 2.0), ext_pos=(1.2, 0.1, 0.6))
    lib = {}
    lib["static_room"] = SimScenario(
        name="static_room", seed=1, duration=10.0,
        trajectory=TrajectorySpec(start=(0.0, 0.0, 1.0), speed_knots=[[0.0, 0.0]]),
        world=WorldSpec(ground_margin=20.0, tile=10.0,
                        walls=[[-8, -6, 12, -6, 4], [12, -6, 12, 6, 4], [12, 6, -8, 6, 4], [-8, 6, -8, -6, 4]],
                        boxes=[[6.0, 2.0, 1.5, 1.0, 2.0, 20.0], [7.0, -3.0, 1.0, 2.0, 1.2, -10.0]]),
        sensor=SensorSpec(**{**radar, "max_range": 30.0}),
    )
    lib["straight_const_v"] = SimScenario(
        name="straight_const_v", seed=2, duration=30.0,
        trajectory=TrajectorySpec(start=(0.0, 0.0, 1.0), speed_knots=[[0.0, 10.0]]),
        world=WorldSpec(city=dict(spacing=22.0, corridor=5.0, fill=0.85)),
        sensor=SensorSpec(**radar),
    )
    lib["figure_eight_loop"] = SimScenario(
        name="figure_eight_loop", seed=3, duration=40.0,
        trajectory=TrajectorySpec(
            start=(-20.0, 0.0, 1.0), speed_knots=[[0.0, 8.0]],
            segments=[{"type": "straight", "length": 20.0},
                      {"type": "arc", "radius": 20.0, "angle_deg": 360.0},
                      {"type": "arc", "radius": 20.0, "angle_deg": -360.0}],
        ),
        world=WorldSpec(city=dict(spacing=20.0, corridor=5.0, fill=0.85)),
        sensor=SensorSpec(**radar),
        noise=NoiseParams(gyro_noise=2e-3, acc_noise=2e-2, gyro_bias_rw=1e-4, acc_bias_rw=1e-3,
                          point_sigma=0.05, doppler_sigma=0.1),
        imu=ImuSpec(bias_gyro=(0.002, -0.001, 0.003), bias_acc=(0.02, -0.03, 0.01)),
    )
    lib["dynamic_crossing"] = SimScenario(
        name="dynamic_crossing", seed=4, duration=20.0,
        trajectory=TrajectorySpec(start=(0.0, 0.0, 1.0), speed_knots=[[0.0, 0.0], [1.0, 0.0], [3.0, 5.0]]),
        # kiosks and shelters along both kerbs give the corridor some along-track structure
        world=WorldSpec(ground_margin=60.0, walls=[[-40, -7, 200, -7, 6], [-40, 7, 200, 7, 6]],
                        boxes=[[x + (6.0 if side < 0 else 0.0), side * 5.6, 1.2, 0.8, 2.5, 0.0]
                               for x in range(-36, 200, 12) for side in (-1.0, 1.0)]),
        actors=[
            ActorSpec(center=(18.0, -2.5, 0.0), size=(30.0, 2.6, 3.5), velocity=(8.0, 0.0), points=420),
            ActorSpec(center=(90.0, 3.0, 0.0), size=(5.0, 2.0, 1.6), velocity=(-6.0, 0.0), points=60),
        ],
        sensor=SensorSpec(**{**radar, "points_per_scan": 300}),
        noise=NoiseParams(gyro_noise=2e-3, acc_noise=3e-2, gyro_bias_rw=1e-4, acc_bias_rw=2e-3,
                          point_sigma=0.05, doppler_sigma=0.1),
        imu=ImuSpec(bias_gyro=(0.001, -0.001, 0.002), bias_acc=(0.05, -0.04, 0.02)),
    )
    lib["calib_perturbed"] = SimScenario(
        name="calib_perturbed", seed=5, duration=60.0,
        trajectory=TrajectorySpec(
            start=(0.0, 0.0, 1.0), speed_knots=[[0.0, 6.0]],
            segments=[{"type": "straight", "length": 30.0}, {"type": "arc", "radius": 15.0, "angle_deg": 90.0},
                      {"type": "straight", "length": 30.0}, {"type": "arc", "radius": 15.0, "angle_deg": 90.0},
                      {"type": "straight", "length": 30.0}, {"type": "arc", "radius": 15.0, "angle_deg": 90.0},
                      {"type": "straight", "length": 30.0}, {"type": "arc", "radius": 15.0, "angle_deg": 90.0},
                      {"type": "arc", "radius": 12.0, "angle_deg": -180.0},
                      {"type": "arc", "radius": 12.0, "angle_deg": 180.0}],
            roll_amp_deg=4.0, pitch_amp_deg=3.0, wobble_hz=0.4,
        ),
        world=WorldSpec(city=dict(spacing=20.0, corridor=5.0, fill=0.85)),
        sensor=SensorSpec(**{**radar, "meta_ext_rpy_deg": (3.0, -2.5, 5.5), "meta_ext_pos": (1.26, 0.04, 0.65)}),
    )
    lib["highspeed_lidar"] = SimScenario(
        name="highspeed_lidar", seed=6, duration=10.0,
        trajectory=TrajectorySpec(start=(0.0, 0.0, 1.5), speed_knots=[[0.0, 30.0]],
                                  segments=[{"type": "straight", "length": 100.0},
                                            {"type": "arc", "radius": 400.0, "angle_deg": 20.0}]),
        world=WorldSpec(city=dict(spacing=30.0, corridor=8.0, fill=0.9, max_height=15.0)),
        sensor=SensorSpec(kind="fmcw_lidar", rate_hz=10.0, scan_period=0.1, fov_az_deg=120.0, fov_el_deg=30.0,
                          max_range=100.0, points_per_scan=3000, ext_rpy_deg=(0.0, 0.0, 0.0), ext_pos=(0.5, 0.0, 0.4)),
        noise=NoiseParams(point_sigma=0.02, doppler_sigma=0.05),
    )
    lib["figure_eight_drift"] = drifting_figure_eight(lib["figure_eight_loop"])
    return lib


def drifting_figure_eight(base: SimScenario) -> SimScenario:
    """Degraded copy of the figure-eight loop whose odometry drifts by metres.

    Sparse, noisier radar returns, a noisier gyro with faster bias walk, shorter range
    and a more open city; loop closures remain verifiable by registration.
    """
    sc = copy.deepcopy(base)
    sc.name, sc.seed = "figure_eight_drift", 2
    sc.noise = replace(sc.noise, point_sigma=0.1, gyro_noise=1.7e-2, gyro_bias_rw=1e-3)
    sc.sensor.points_per_scan = 40
    sc.sensor.max_range = 40.0
    sc.world.city["fill"] = 0.5
    return sc
