"""Sensor data model, on-disk log format and measurement packetization.

Log directory layout (format version 1)::

    meta.toml                     sensor kind, scan period, extrinsic guess, noise
    imu.csv                       '# dopplerio-log v1' then 't,gx,gy,gz,ax,ay,az'
    scans/<index>_<end_ns>.csv    '# dopplerio-log v1' then 'dt,x,y,z,doppler,intensity'

Doppler sign: the stored value is negative when the range to a static
target is closing, i.e. ``doppler = -direction . v_sensor``.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import tomli
import tomli_w

from .manifold import quat_to_rot, rot_to_quat

log = logging.getLogger(__name__)

LOG_VERSION = "# dopplerio-log v1"
IMU_HEADER = ["t", "gx", "gy", "gz", "ax", "ay", "az"]
SCAN_HEADER = ["dt", "x", "y", "z", "doppler", "intensity"]
MIN_RANGE = 0.5
OFFSET_TOL = 1e-9


class LogFormatError(ValueError):
    pass


class StreamError(RuntimeError):
    pass


class SensorKind(str, enum.Enum):
    RADAR = "radar"
    FMCW_LIDAR = "fmcw_lidar"


class Label(enum.IntEnum):
    UNCLASSIFIED = 0
    STATIC = 1
    DYNAMIC = 2


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class SensorPoint:
    offset_t: float
    position: np.ndarray
    doppler: float
    intensity: float = 0.0
    label: Label = Label.UNCLASSIFIED

    def direction(self) -> np.ndarray:
        r = np.linalg.norm(self.position)
        if r <= 0.0:
            raise ValueError("zero-range point has no direction")
        return self.position / r


@dataclass
class Scan:
    """One radar or FMCW-LiDAR frame stored column-wise.

    ``deskewed`` is set once positions have been re-expressed at scan end.
    """

    end_time: float
    kind: SensorKind
    offset_t: np.ndarray
    xyz: np.ndarray
    doppler: np.ndarray
    intensity: np.ndarray
    label: np.ndarray
    deskewed: bool = False

    @classmethod
    def from_arrays(cls, end_time, kind, xyz, doppler, offset_t=None, intensity=None, label=None):
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        n = len(xyz)
        return cls(
            end_time=float(end_time),
            kind=SensorKind(kind),
            offset_t=np.zeros(n) if offset_t is None else np.asarray(offset_t, dtype=float),
            xyz=xyz,
            doppler=np.asarray(doppler, dtype=float).reshape(n),
            intensity=np.zeros(n) if intensity is None else np.asarray(intensity, dtype=float),
            label=np.zeros(n, dtype=np.int8) if label is None else np.asarray(label, dtype=np.int8),
        )

    def __len__(self) -> int:
        return len(self.xyz)

    def point(self, i: int) -> SensorPoint:
        return SensorPoint(
            float(self.offset_t[i]), self.xyz[i].copy(), float(self.doppler[i]),
            float(self.intensity[i]), Label(int(self.label[i])),
        )

    def directions(self) -> np.ndarray:
        return self.xyz / np.linalg.norm(self.xyz, axis=1, keepdims=True)

    def copy(self, **changes) -> "Scan":
        fields = dict(
            end_time=self.end_time, kind=self.kind, offset_t=self.offset_t.copy(), xyz=self.xyz.copy(),
            doppler=self.doppler.copy(), intensity=self.intensity.copy(), label=self.label.copy(),
            deskewed=self.deskewed,
        )
        fields.update(changes)
        return Scan(**fields)

    def subset(self, mask) -> "Scan":
        return Scan(self.end_time, self.kind, self.offset_t[mask], self.xyz[mask], self.doppler[mask],
                    self.intensity[mask], self.label[mask], self.deskewed)

    def static_mask(self) -> np.ndarray:
        return self.label == Label.STATIC


@dataclass(frozen=True)
class NoiseParams:
    gyro_noise: float = 1e-3        # rad/s/sqrt(Hz)
    acc_noise: float = 1e-2         # m/s^2/sqrt(Hz)
    gyro_bias_rw: float = 1e-5      # rad/s^2/sqrt(Hz)
    acc_bias_rw: float = 1e-4       # m/s^3/sqrt(Hz)
    point_sigma: float = 0.05       # m
    doppler_sigma: float = 0.1      # m/s

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"noise parameter {k} must be > 0, got {v}")


@dataclass(frozen=True)
class LogMeta:
    kind: SensorKind = SensorKind.RADAR
    scan_period: float = 0.1
    ext_quat_wxyz: tuple = (1.0, 0.0, 0.0, 0.0)
    ext_pos: tuple = (0.0, 0.0, 0.0)
    noise: NoiseParams = field(default_factory=NoiseParams)
    gravity: float = 9.81

    @property
    def ext_rot(self) -> np.ndarray:
        return quat_to_rot(self.ext_quat_wxyz)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "sensor": {"kind": self.kind.value, "scan_period": self.scan_period},
            "extrinsic": {"quat_wxyz": list(self.ext_quat_wxyz), "pos": list(self.ext_pos)},
            "noise": dict(self.noise.__dict__),
            "gravity": self.gravity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogMeta":
        return cls(
            kind=SensorKind(d["sensor"]["kind"]),
            scan_period=float(d["sensor"]["scan_period"]),
            ext_quat_wxyz=tuple(float(v) for v in d["extrinsic"]["quat_wxyz"]),
            ext_pos=tuple(float(v) for v in d["extrinsic"]["pos"]),
            noise=NoiseParams(**{k: float(v) for k, v in d.get("noise", {}).items()}),
            gravity=float(d.get("gravity", 9.81)),
        )

    @classmethod
    def from_extrinsic(cls, kind, scan_period, ext_rot, ext_pos, noise, gravity=9.81) -> "LogMeta":
        return cls(SensorKind(kind), float(scan_period), tuple(float(v) for v in rot_to_quat(ext_rot)),
                   tuple(float(v) for v in ext_pos), noise, float(gravity))


@dataclass
class MeasurementPacket:
    scan: Scan
    imu_window: list


# --------------------------------------------------------------------------- writing


def _fmt(x: float) -> str:
    return repr(float(x))


def scan_filename(index: int, end_time: float) -> str:
    return f"{index:06d}_{int(round(end_time * 1e9))}.csv"


def write_scan(path: Path, scan: Scan) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"{LOG_VERSION} kind={scan.kind.value}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCAN_HEADER)
        for i in range(len(scan)):
            x, y, z = scan.xyz[i]
            w.writerow([_fmt(scan.offset_t[i]), _fmt(x), _fmt(y), _fmt(z), _fmt(scan.doppler[i]),
                        _fmt(scan.intensity[i])])


def write_log(path, imu: Iterable[ImuSample], scans: Iterable[Scan], meta: LogMeta) -> Path:
    path = Path(path)
    (path / "scans").mkdir(parents=True, exist_ok=True)
    with open(path / "meta.toml", "wb") as f:
        tomli_w.dump(meta.to_dict(), f)
    with open(path / "imu.csv", "w", newline="") as f:
        f.write(LOG_VERSION + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(IMU_HEADER)
        for s in imu:
            w.writerow([_fmt(s.t), *map(_fmt, s.gyro), *map(_fmt, s.accel)])
    for i, scan in enumerate(scans):
        write_scan(path / "scans" / scan_filename(i, scan.end_time), scan)
    return path


# --------------------------------------------------------------------------- reading


def read_meta(path) -> LogMeta:
    p = Path(path) / "meta.toml"
    if not p.exists():
        return LogMeta()
    with open(p, "rb") as f:
        return LogMeta.from_dict(tomli.load(f))


def _read_table(path: Path, header: list[str]) -> Iterator[tuple[int, list[float]]]:
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    start = 0
    if lines and lines[0].startswith("#"):
        if not lines[0].startswith(LOG_VERSION):
            raise LogFormatError(f"{path}:1: unsupported log version line {lines[0]!r}")
        start = 1
    if len(lines) <= start or [h.strip() for h in lines[start].split(",")] != header:
        raise LogFormatError(f"{path}:{start + 1}: expected header {','.join(header)}")
    for lineno, row in enumerate(csv.reader(lines[start + 1:]), start=start + 2):
        if not row:
            continue
        if len(row) != len(header):
            raise LogFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            yield lineno, [float(v) for v in row]
        except ValueError as e:
            raise LogFormatError(f"{path}:{lineno}: {e}") from None


def _read_array(path: Path, header: list[str]) -> np.ndarray:
    """Whole table as an (N, len(header)) array; malformed files fall back to
    the row reader so the error names the offending line."""
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    start = 1 if lines and lines[0].startswith("#") else 0
    try:
        if len(lines) > start and [h.strip() for h in lines[start].split(",")] == header:
            body = [ln for ln in lines[start + 1:] if ln.strip()]
            arr = np.loadtxt(body, delimiter=",", ndmin=2, dtype=float) if body else np.zeros((0, len(header)))
            if arr.shape[1] == len(header) and (start == 0 or lines[0].startswith(LOG_VERSION)):
                return arr
    except ValueError:
        pass
    return np.array([v for _, v in _read_table(path, header)], dtype=float).reshape(-1, len(header))


def read_imu(path) -> list[ImuSample]:
    path = Path(path)
    out: list[ImuSample] = []
    last = -math.inf
    for lineno, v in _read_table(path, IMU_HEADER):
        if not all(math.isfinite(x) for x in v):
            raise LogFormatError(f"{path}:{lineno}: non-finite value")
        if v[0] <= last:
            raise StreamError(f"{path}:{lineno}: IMU time {v[0]!r} not after previous {last!r}")
        last = v[0]
        out.append(ImuSample(v[0], np.array(v[1:4]), np.array(v[4:7])))
    if not out:
        raise LogFormatError(f"{path}: no IMU data")
    return out


@dataclass
class IngestCounters:
    dropped_near: int = 0
    dropped_nonfinite: int = 0


def read_scan(path, kind: SensorKind, scan_period: float, counters: IngestCounters | None = None) -> Scan:
    path = Path(path)
    stem = path.stem
    try:
        end_ns = int(stem.split("_")[1])
    except (IndexError, ValueError):
        raise LogFormatError(f"{path}: file name must be <index>_<end_time_ns>.csv") from None
    arr = _read_array(path, SCAN_HEADER)
    finite = np.all(np.isfinite(arr), axis=1)
    rng = np.linalg.norm(arr[:, 1:4], axis=1)
    near = finite & (rng < MIN_RANGE)
    if counters is not None:
        counters.dropped_nonfinite += int((~finite).sum())
        counters.dropped_near += int(near.sum())
    arr = arr[finite & ~near]
    dt = arr[:, 0]
    if kind == SensorKind.RADAR and np.any(dt != 0.0):
        raise LogFormatError(f"{path}: radar scans must have all offsets equal to 0")
    if np.any(dt > OFFSET_TOL) or np.any(dt < -scan_period - OFFSET_TOL):
        raise LogFormatError(f"{path}: point offsets outside [-{scan_period}, 0]")
    return Scan.from_arrays(end_ns / 1e9, kind, arr[:, 1:4], arr[:, 4], offset_t=dt, intensity=arr[:, 5])


class LogStream:
    """Iterable over the records of a log directory in global time order.

    IMU samples sharing a timestamp with a scan end are yielded first.
    """

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.is_dir():
            raise FileNotFoundError(f"log directory {self.path} does not exist")
        self.meta = read_meta(self.path)
        self.imu = read_imu(self.path / "imu.csv")
        scan_dir = self.path / "scans"
        self.scan_files = sorted(scan_dir.glob("*.csv")) if scan_dir.is_dir() else []
        self.counters = IngestCounters()

    def scans(self) -> Iterator[Scan]:
        last = -math.inf
        for p in self.scan_files:
            scan = read_scan(p, self.meta.kind, self.meta.scan_period, self.counters)
            if scan.end_time <= last:
                raise StreamError(f"{p}: scan time {scan.end_time!r} not after previous {last!r}")
            last = scan.end_time
            yield scan

    def __iter__(self) -> Iterator:
        imu = iter(self.imu)
        pending = next(imu, None)
        for scan in self.scans():
            while pending is not None and pending.t <= scan.end_time:
                yield pending
                pending = next(imu, None)
            yield scan
        while pending is not None:
            yield pending
            pending = next(imu, None)


def open_log(path) -> LogStream:
    return LogStream(path)


@dataclass
class PacketStats:
    emitted: int = 0
    skipped_empty: int = 0


def packetize(stream: Iterable, stats: PacketStats | None = None) -> Iterator[MeasurementPacket]:
    """Pair each scan with the IMU samples in (previous scan end, scan end]."""
    stats = stats if stats is not None else PacketStats()
    window: list[ImuSample] = []
    last_imu_t = -math.inf
    last_scan_t = -math.inf
    for rec in stream:
        if isinstance(rec, ImuSample):
            if rec.t <= last_imu_t:
                raise StreamError(f"IMU time {rec.t!r} not after previous {last_imu_t!r}")
            last_imu_t = rec.t
            window.append(rec)
            continue
        if rec.end_time <= last_scan_t:
            raise StreamError(f"scan time {rec.end_time!r} not after previous scan {last_scan_t!r}")
        if window and window[-1].t > rec.end_time:
            raise StreamError(f"scan time {rec.end_time!r} earlier than buffered IMU {window[-1].t!r}")
        last_scan_t = rec.end_time
        if not window:
            stats.skipped_empty += 1
            log.warning("scan at %.6f has an empty IMU window; skipped", rec.end_time)
            continue
        stats.emitted += 1
        yield MeasurementPacket(rec, window)
        window = []
