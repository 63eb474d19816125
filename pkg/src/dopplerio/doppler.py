"""Per-point Doppler prediction, IMU-driven velocity filter and least-squares
ego-velocity estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .manifold import NavState
from .propagation import PropagationLog, predicted_velocity_at
from .sensors import Label, Scan, SensorPoint


class DegenerateGeometryError(ValueError):
    def __init__(self, cond: float):
        super().__init__(f"direction set is rank deficient (condition number {cond:.3e})")
        self.cond = cond


@dataclass(frozen=True)
class VelocityFilterConfig:
    upsilon: float = 0.5
    min_static_points: int = 3

    def __post_init__(self):
        if not self.upsilon > 0:
            raise ValueError("upsilon must be > 0")


@dataclass(frozen=True)
class ConsensusConfig:
    """Label-free baseline: random 3-point consensus then least squares."""

    iterations: int = 17
    gate: float = 0.2
    seed: int = 0


@dataclass
class EgoVelocityEstimate:
    v_s: np.ndarray
    cov: np.ndarray
    inlier_count: int

    @property
    def valid(self) -> bool:
        return self.inlier_count >= 3


MAX_COND = 1e8


def predict_doppler(point: SensorPoint, v_s) -> float:
    return float(-point.direction() @ np.asarray(v_s, dtype=float))


def predicted_dopplers(scan: Scan, plog: PropagationLog, state: NavState) -> np.ndarray:
    if len(scan) == 0:
        return np.zeros(0)
    times = scan.end_time + scan.offset_t
    if np.all(scan.offset_t == 0.0):
        v = predicted_velocity_at(plog, state, scan.end_time)
        return -(scan.directions() @ v)
    v = predicted_velocity_at(plog, state, times)
    return -np.einsum("ij,ij->i", scan.directions(), v)


def classify_points(scan: Scan, plog: PropagationLog, state: NavState, cfg: VelocityFilterConfig) -> Scan:
    """Label each point static iff |predicted - measured doppler| <= upsilon."""
    pred = predicted_dopplers(scan, plog, state)
    static = np.abs(pred - scan.doppler) <= cfg.upsilon
    labels = np.where(static, Label.STATIC, Label.DYNAMIC).astype(np.int8)
    return scan.copy(label=labels)


def label_counts(scan: Scan) -> tuple[int, int]:
    return int((scan.label == Label.STATIC).sum()), int((scan.label == Label.DYNAMIC).sum())


def _lsq(dirs: np.ndarray, dop: np.ndarray) -> EgoVelocityEstimate:
    n = len(dirs)
    if n < 3:
        raise DegenerateGeometryError(np.inf)
    s = np.linalg.svd(dirs, compute_uv=False)
    cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    if cond > MAX_COND:
        raise DegenerateGeometryError(cond)
    v, *_ = np.linalg.lstsq(dirs, -dop, rcond=None)
    res = dirs @ v + dop
    var = float(res @ res) / (n - 3) if n > 3 else 0.0
    cov = var * np.linalg.inv(dirs.T @ dirs)
    return EgoVelocityEstimate(v, 0.5 * (cov + cov.T), n)


def estimate_ego_velocity_lsq(scan: Scan, use_labels: bool, consensus: ConsensusConfig | None = None) -> EgoVelocityEstimate:
    """Sensor-frame ego velocity from ``-doppler = direction . v``.

    With ``use_labels`` only static-labelled points are used; otherwise a
    random-sample consensus loop selects inliers first.
    """
    dirs = scan.directions()
    dop = scan.doppler
    if use_labels:
        m = scan.static_mask()
        return _lsq(dirs[m], dop[m])
    cfg = consensus or ConsensusConfig()
    n = len(dirs)
    if n < 3:
        raise DegenerateGeometryError(np.inf)
    rng = np.random.default_rng(cfg.seed)
    best = None
    best_count = -1
    for _ in range(cfg.iterations):
        idx = rng.choice(n, 3, replace=False)
        A = dirs[idx]
        if abs(np.linalg.det(A)) < 1e-6:
            continue
        v = np.linalg.solve(A, -dop[idx])
        inl = np.abs(dirs @ v + dop) <= cfg.gate
        c = int(inl.sum())
        if c > best_count:
            best, best_count = inl, c
    if best is None or best_count < 3:
        return _lsq(dirs, dop)
    return _lsq(dirs[best], dop[best])
