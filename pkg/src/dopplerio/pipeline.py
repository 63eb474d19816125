"""End-to-end driver: packets -> propagation -> velocity filter -> compensation
-> iterated update -> map, plus keyframing and the pose-graph back end in
SLAM mode."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import backend as be
from .compensation import compensate_doppler, compensate_geometry
from .doppler import (
    ConsensusConfig, DegenerateGeometryError, VelocityFilterConfig, classify_points, estimate_ego_velocity_lsq,
    label_counts,
)
from .estimator import InsufficientCorrespondenceError, UpdateConfig, UpdateDiagnostics, iekf_update
from .manifold import EXT_POS, EXT_ROT, STATE_DIM, NavState, RigidTransform, rot_to_quat, so3_exp, so3_log
from .mapping import MapIndex, export_csv, export_pcd, voxel_downsample_indices
from .metrics import write_tum
from .propagation import PropagationError, StateWithCov, gyro_at, propagate_forward, sensor_velocity
from .sensors import ImuSample, Label, LogMeta, MeasurementPacket, PacketStats, Scan, open_log, packetize

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """Fatal error tagged with the stage that raised it."""

    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


@dataclass
class InitConfig:
    rot_sigma: float = 1e-3
    pos_sigma: float = 1e-3
    vel_sigma: float = 0.1
    bg_sigma: float = 0.01
    ba_sigma: float = 0.1
    grav_sigma: float = 0.05
    ext_rot_sigma: float = 0.1  # used when the extrinsic is estimated
    ext_pos_sigma: float = 0.15
    fixed_sigma: float = 1e-6
    # start at rest when the IMU is quiet and v = 0 explains this share of the dopplers
    rest_fraction: float = 0.3
    rest_gyro: float = 0.05  # rad/s
    rest_acc: float = 0.3  # m/s^2, deviation of |a| from gravity


@dataclass
class PipelineConfig:
    mode: str = "odometry"  # or "slam"
    velocity_filter: bool = True
    doppler_residual: bool = True
    online_calibration: bool = False
    loop_closure: bool = True
    deterministic: bool = True
    lock_gravity_norm: bool = True
    map_voxel: float = 0.4
    scan_voxel: float = 0.0  # registration downsampling of the current scan, 0 = off
    max_update_points: int = 1500
    prune_radius: float = 0.0  # 0 = never prune
    init: InitConfig = field(default_factory=InitConfig)
    filter: VelocityFilterConfig = field(default_factory=VelocityFilterConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    update: UpdateConfig = field(default_factory=UpdateConfig)
    keyframe: be.KeyframePolicy = field(default_factory=be.KeyframePolicy)
    loop: be.LoopConfig = field(default_factory=be.LoopConfig)
    graph: be.GraphConfig = field(default_factory=be.GraphConfig)
    lm: be.LMConfig = field(default_factory=be.LMConfig)
    calib: be.CalibConfig = field(default_factory=be.CalibConfig)

    def __post_init__(self):
        if self.mode not in ("odometry", "slam"):
            raise ValueError(f"mode must be 'odometry' or 'slam', got {self.mode!r}")

    @property
    def keyframing(self) -> bool:
        return self.mode == "slam"

    def to_dict(self) -> dict:
        return _to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _from_dict(cls, d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, "rb") as f:
            return cls.from_dict(tomli.load(f))

    def save(self, path) -> None:
        with open(path, "wb") as f:
            tomli_w.dump(self.to_dict(), f)


def _to_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if is_dataclass(v):
            out[f.name] = _to_dict(v)
        elif v is not None:
            out[f.name] = v
    return out


def _from_dict(cls, d: dict):
    kw = {}
    known = {f.name: f for f in fields(cls)}
    for k, v in d.items():
        if k not in known:
            raise ValueError(f"unknown config key {k!r} for {cls.__name__}")
        default = getattr(cls(), k)
        if is_dataclass(default) and isinstance(v, dict):
            kw[k] = _from_dict(type(default), v)
        elif isinstance(default, tuple) and isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    return cls(**kw)


def apply_overrides(cfg: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply ``dotted.key=value`` overrides (value parsed as a TOML scalar)."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            val = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            val = raw
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return PipelineConfig.from_dict(d)


@dataclass
class FrameRecord:
    t: float
    rot: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    anchor: int  # keyframe id whose pose this frame is expressed against, -1 if none
    rel: RigidTransform | None
    static: int = 0
    dynamic: int = 0
    diag: UpdateDiagnostics = field(default_factory=UpdateDiagnostics)
    ego_err: float = float("nan")
    extrinsic: RigidTransform | None = None
    gravity: np.ndarray | None = None


@dataclass
class PipelineResult:
    times: np.ndarray
    rot: np.ndarray
    pos: np.ndarray
    frames: list
    map_points: np.ndarray
    extrinsic: RigidTransform
    final_state: NavState
    calibration: be.CalibrationResult | None
    loops: list
    keyframes: list
    counters: dict
    runtime: float
    failed: str | None = None
    doppler_debug: list = field(default_factory=list)

    def write(self, out_dir, map_format: str = "pcd") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tum(out / "trajectory.tum", self.times, self.pos, self.rot)
        if map_format == "pcd":
            export_pcd(out / "map.pcd", self.map_points)
        else:
            export_csv(out / "map.csv", self.map_points)
        with open(out / "diagnostics.csv", "w") as f:
            f.write("t,static,dynamic,geo_rows,doppler_rows,rejected,iterations,final_cost,condition,"
                    "skipped,diverged,damped\n")
            for fr in self.frames:
                d = fr.diag
                f.write(f"{fr.t!r},{fr.static},{fr.dynamic},{d.geo_rows},{d.doppler_rows},{d.rejected},"
                        f"{d.iterations},{d.final_cost!r},{d.condition!r},{int(d.skipped)},{int(d.diverged)},"
                        f"{int(d.damped)}\n")
        summary = {
            "frames": len(self.frames), "keyframes": len(self.keyframes), "loops": len(self.loops),
            "counters": self.counters,
            "extrinsic": {"quat_wxyz": [float(v) for v in rot_to_quat(self.extrinsic.rot)],
                          "pos": [float(v) for v in self.extrinsic.trans]},
        }
        if self.calibration is not None:
            summary["calibration"] = {"status": self.calibration.status, "message": self.calibration.message}
        if self.failed:
            summary["failed"] = self.failed
        with open(out / "summary.toml", "wb") as f:
            tomli_w.dump(summary, f)
        # wall-clock kept apart so deterministic runs reproduce every other file byte for byte
        with open(out / "timing.toml", "wb") as f:
            tomli_w.dump({"runtime_s": self.runtime, "frames_per_s": len(self.frames) / max(self.runtime, 1e-9)}, f)
        if self.doppler_debug:
            with open(out / "doppler_debug.csv", "w") as f:
                f.write("t,index,doppler,predicted,label\n")
                for t, pred, scan in self.doppler_debug:
                    for i in range(len(scan)):
                        f.write(f"{t!r},{i},{float(scan.doppler[i])!r},{float(pred[i])!r},{int(scan.label[i])}\n")
        return out


# ----------------------------------------------------------------------------- helpers


def _initial_state(packet: MeasurementPacket, meta: LogMeta, cfg: PipelineConfig) -> StateWithCov:
    """Gravity-aligned world at the first scan with yaw zero; velocity from the
    label-free Doppler estimate."""
    acc = np.mean([s.accel for s in packet.imu_window[-10:]], axis=0)
    z = acc / np.linalg.norm(acc)  # body-frame "up"
    # rotation taking body z onto world z with zero yaw about world z
    pitch = math.atan2(-z[0], math.hypot(z[1], z[2]))
    roll = math.atan2(z[1], z[2])
    R0 = so3_exp([0, pitch, 0]) @ so3_exp([roll, 0, 0])
    grav = np.array([0.0, 0.0, -meta.gravity])
    ext_rot, ext_pos = meta.ext_rot, np.array(meta.ext_pos, dtype=float)
    gyro = packet.imu_window[-1].gyro
    v_w = np.zeros(3)
    if _at_rest(packet, meta, cfg):
        log.info("initialising at rest")
    elif len(packet.scan) >= 3:
        try:
            est = estimate_ego_velocity_lsq(packet.scan, use_labels=False, consensus=cfg.consensus)
            v_b = ext_rot @ est.v_s - np.cross(gyro, ext_pos)
            v_w = R0 @ v_b
        except DegenerateGeometryError as e:
            log.warning("initial velocity unavailable (%s); starting at rest", e)
    x = NavState(rot=R0, pos=np.zeros(3), ext_rot=ext_rot, ext_pos=ext_pos, vel=v_w, gravity=grav)
    ic = cfg.init
    sig = np.empty(STATE_DIM)
    sig[0:3], sig[3:6] = ic.rot_sigma, ic.pos_sigma
    if cfg.online_calibration:
        sig[6:9], sig[9:12] = ic.ext_rot_sigma, ic.ext_pos_sigma
    else:
        sig[6:12] = ic.fixed_sigma
    sig[12:15], sig[15:18], sig[18:21], sig[21:24] = ic.vel_sigma, ic.bg_sigma, ic.ba_sigma, ic.grav_sigma
    return StateWithCov(x, np.diag(sig**2), packet.scan.end_time)


def _at_rest(packet: MeasurementPacket, meta: LogMeta, cfg: PipelineConfig) -> bool:
    """Quiet IMU and a zero-velocity hypothesis that fits enough of the dopplers.

    A majority of movers can outvote the static scene in the label-free consensus, so the
    rest hypothesis is tested first; constant-velocity starts fail the doppler test.
    """
    ic = cfg.init
    win = packet.imu_window[-10:]
    if not win or len(packet.scan) == 0:
        return False
    gyro = np.array([s.gyro for s in win])
    acc = np.array([s.accel for s in win])
    if np.linalg.norm(gyro.mean(axis=0)) > ic.rest_gyro:
        return False
    if abs(np.linalg.norm(acc.mean(axis=0)) - meta.gravity) > ic.rest_acc:
        return False
    return float(np.mean(np.abs(packet.scan.doppler) <= cfg.consensus.gate)) >= ic.rest_fraction


def _static_world_points(scan: Scan, state: NavState) -> np.ndarray:
    m = scan.static_mask()
    return state.sensor_pose().apply(scan.xyz[m])


def _registration_subset(scan: Scan, cfg: PipelineConfig) -> Scan:
    sub = scan.subset(scan.static_mask())
    if cfg.scan_voxel > 0 and len(sub):
        sub = sub.subset(voxel_downsample_indices(sub.xyz, cfg.scan_voxel))
    if len(sub) > cfg.max_update_points:
        # deterministic even stride
        idx = np.linspace(0, len(sub) - 1, cfg.max_update_points).round().astype(int)
        sub = sub.subset(np.unique(idx))
    return sub


def _apply_correction(swc: StateWithCov, T: RigidTransform) -> StateWithCov:
    x = swc.state
    x2 = x.with_(rot=T.rot @ x.rot, pos=T.apply(x.pos[None])[0], vel=T.rot @ x.vel, gravity=T.rot @ x.gravity)
    return StateWithCov(x2, swc.cov, swc.t)


# ----------------------------------------------------------------------------- driver


def _lock_gravity(swc: StateWithCov, g0: float) -> StateWithCov:
    """Keep the gravity vector on the sphere of known radius; only its direction is estimated."""
    g = swc.state.gravity
    n = np.linalg.norm(g)
    if n == 0:
        return swc
    u = g / n
    J = np.eye(STATE_DIM)
    J[21:24, 21:24] = np.eye(3) - np.outer(u, u)
    return StateWithCov(swc.state.with_(gravity=u * g0), J @ swc.cov @ J.T + 1e-12 * np.eye(STATE_DIM), swc.t)


def run_packets(packets, meta: LogMeta, cfg: PipelineConfig, counters: dict | None = None,
                doppler_debug: bool = False) -> PipelineResult:
    t_start = time.perf_counter()
    noise = meta.noise
    counters = dict(counters or {})
    ucfg = replace(cfg.update, use_doppler=cfg.doppler_residual, estimate_extrinsic=cfg.online_calibration)
    index = MapIndex(cfg.map_voxel)
    frames: list[FrameRecord] = []
    debug = []
    swc: StateWithCov | None = None
    last: ImuSample | None = None
    prev_end = None
    backend = be.Backend(cfg.keyframe, cfg.loop, cfg.graph, cfg.lm, cfg.calib, noise,
                         loop_closure=cfg.loop_closure, calibration=cfg.online_calibration) if cfg.keyframing else None
    failed = None
    counters.setdefault("skipped_updates", 0)
    counters.setdefault("diverged_updates", 0)
    stage = "ingest"
    try:
        for pkt in packets:
            scan = pkt.scan
            if swc is None:
                stage = "init"
                swc = _initial_state(pkt, meta, cfg)
                labeled = scan.copy(label=np.full(len(scan), Label.STATIC, dtype=np.int8))
                if cfg.velocity_filter:
                    # no propagation interval yet: gate against the initial velocity
                    labeled = _initial_labels(scan, swc.state, pkt.imu_window[-1].gyro, cfg)
                index.insert(_static_world_points(labeled, swc.state))
                last = pkt.imu_window[-1]
                prev_end = scan.end_time
                fr = _record(frames, swc, labeled, UpdateDiagnostics())
                if backend is not None:
                    stage = "backend"
                    backend.add_frame(swc, labeled, last.gyro, pkt.imu_window, fr)
                continue

            stage = "propagation"
            swc, plog = propagate_forward(swc, pkt.imu_window, noise, last=last, t_end=scan.end_time)
            gyro_end = gyro_at(plog, scan.end_time)[0]
            frame_dt = scan.end_time - prev_end

            stage = "velocity-filter"
            if cfg.velocity_filter:
                labeled = classify_points(scan, plog, swc.state, cfg.filter)
                if label_counts(labeled)[0] < cfg.filter.min_static_points:
                    counters["starved_frames"] = counters.get("starved_frames", 0) + 1
                    _warn_limited(counters["starved_frames"], "t=%.3f: too few static points after filtering",
                                  scan.end_time)
            else:
                labeled = scan.copy(label=np.full(len(scan), Label.STATIC, dtype=np.int8))
            if doppler_debug:
                from .doppler import predicted_dopplers

                debug.append((scan.end_time, predicted_dopplers(scan, plog, swc.state), labeled))

            stage = "compensation"
            comp = compensate_geometry(labeled, plog, swc.state)
            comp = compensate_doppler(comp, plog, swc.state)

            stage = "update"
            sub = _registration_subset(comp, cfg)
            try:
                swc, diag = iekf_update(swc, sub, index, gyro_end, ucfg, noise, frame_dt)
                if diag.diverged:
                    counters["diverged_updates"] += 1
            except InsufficientCorrespondenceError as e:
                counters["skipped_updates"] += 1
                _warn_limited(counters["skipped_updates"], "t=%.3f: update skipped (%s)", scan.end_time, e)
                diag = UpdateDiagnostics(skipped=True)
            if not swc.state.is_finite():
                raise PipelineError("update", f"non-finite state at t={scan.end_time!r}")
            if cfg.lock_gravity_norm:
                swc = _lock_gravity(swc, meta.gravity)

            stage = "map"
            # points re-expressed with the updated state
            comp = compensate_geometry(labeled, plog, swc.state) if comp.deskewed else comp
            index.insert(_static_world_points(comp, swc.state))
            if cfg.prune_radius > 0:
                index.prune(swc.state.pos, cfg.prune_radius)

            fr = _record(frames, swc, comp, diag)
            if backend is not None:
                stage = "backend"
                corr = backend.add_frame(swc, comp, gyro_end, pkt.imu_window, fr)
                if corr is not None:
                    swc = _apply_correction(swc, corr.transform)
                    if corr.extrinsic is not None:
                        swc = StateWithCov(swc.state.with_(ext_rot=corr.extrinsic.rot, ext_pos=corr.extrinsic.trans),
                                           swc.cov, swc.t)
                    if corr.rebuild_map:
                        index = MapIndex(cfg.map_voxel)
                        index.insert(backend.map_points())
            last = pkt.imu_window[-1]
            prev_end = scan.end_time
    except (PropagationError, PipelineError) as e:
        failed = f"[{stage}] {e}" if not isinstance(e, PipelineError) else str(e)
        log.error("pipeline aborted: %s", failed)
    except (ValueError, np.linalg.LinAlgError) as e:
        failed = f"[{stage}] {e}"
        log.error("pipeline aborted: %s", failed)

    if counters["skipped_updates"] > WARN_LIMIT:
        log.warning("%d updates skipped in total", counters["skipped_updates"])
    calib = None
    loops, kfs = [], []
    if backend is not None and failed is None:
        backend.finish()
    if backend is not None:
        calib, loops, kfs = backend.calibration, backend.loops, backend.keyframes
        for fr in frames:
            T = backend.frame_pose(fr)
            if T is not None:
                fr.rot, fr.pos = T.rot, T.trans
    if frames:
        times = np.array([f.t for f in frames])
        rot = np.array([f.rot for f in frames])
        pos = np.array([f.pos for f in frames])
    else:
        times, rot, pos = np.zeros(0), np.zeros((0, 3, 3)), np.zeros((0, 3))
    ext = swc.state.extrinsic() if swc is not None else RigidTransform(meta.ext_rot, np.array(meta.ext_pos))
    if calib is not None and calib.status == "accepted":
        ext = calib.extrinsic
    map_pts = backend.map_points() if backend is not None and backend.keyframes else index.points()
    return PipelineResult(times, rot, pos, frames, map_pts, ext, swc.state if swc else None, calib, loops, kfs,
                          counters, time.perf_counter() - t_start, failed, debug)


WARN_LIMIT = 3  # per-frame warnings of one kind before they drop to debug level


def _warn_limited(count: int, msg: str, *args) -> None:
    if count <= WARN_LIMIT:
        log.warning(msg + (" (further occurrences at debug level)" if count == WARN_LIMIT else ""), *args)
    else:
        log.debug(msg, *args)


def _initial_labels(scan: Scan, state: NavState, gyro, cfg: PipelineConfig) -> Scan:
    x = state
    v_s = x.ext_rot.T @ (x.rot.T @ x.vel + np.cross(gyro, x.ext_pos))
    bad = np.abs(-(scan.directions() @ v_s) - scan.doppler) > cfg.filter.upsilon
    lab = np.where(bad, Label.DYNAMIC, Label.STATIC).astype(np.int8)
    return scan.copy(label=lab)


def _record(frames, swc: StateWithCov, scan: Scan, diag) -> FrameRecord:
    s, d = label_counts(scan)
    fr = FrameRecord(swc.t, swc.state.rot.copy(), swc.state.pos.copy(), swc.state.vel.copy(), -1, None, s, d, diag,
                     extrinsic=swc.state.extrinsic(), gravity=swc.state.gravity.copy())
    frames.append(fr)
    return fr


def run_pipeline(log_dir, cfg: PipelineConfig | None = None, out_dir=None, doppler_debug: bool = False) -> PipelineResult:
    cfg = cfg or PipelineConfig()
    stream = open_log(log_dir)
    stats = PacketStats()
    res = run_packets(packetize(stream, stats), stream.meta, cfg, doppler_debug=doppler_debug)
    res.counters.update(dropped_near=stream.counters.dropped_near, dropped_nonfinite=stream.counters.dropped_nonfinite,
                        packets=stats.emitted, skipped_empty=stats.skipped_empty)
    if out_dir is not None:
        res.write(out_dir)
    return res
