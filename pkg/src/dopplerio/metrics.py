"""Trajectory IO (TUM text format) and APE / RPE metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

from .manifold import quat_to_rot, rot_to_quat, so3_log

ASSOC_TOL = 0.01  # s


class MetricsError(ValueError):
    pass


@dataclass
class Trajectory:
    times: np.ndarray
    pos: np.ndarray
    rot: np.ndarray  # (N, 3, 3)

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class MetricsReport:
    ape_rmse: float
    rpe_trans: float  # RMSE over consecutive pairs, m
    rpe_rot_deg: float
    length: float
    alignment: str
    planar: bool
    n_pairs: int
    ape_series: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    rpe_trans_series: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    rpe_rot_series: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    times: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def summary(self) -> dict:
        return {
            "ape_rmse_m": self.ape_rmse, "rpe_trans_m": self.rpe_trans, "rpe_rot_deg": self.rpe_rot_deg,
            "length_m": self.length, "alignment": self.alignment, "planar": self.planar, "pairs": self.n_pairs,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.toml", "wb") as f:
            tomli_w.dump(self.summary(), f)
        with open(out / "metrics_series.csv", "w") as f:
            f.write("t,ape,rpe_trans,rpe_rot_deg\n")
            for i, t in enumerate(self.times):
                rt = self.rpe_trans_series[i - 1] if i > 0 else 0.0
                rr = self.rpe_rot_series[i - 1] if i > 0 else 0.0
                f.write(f"{t!r},{float(self.ape_series[i])!r},{float(rt)!r},{float(rr)!r}\n")


def write_tum(path, times, pos, rot) -> None:
    with open(path, "w") as f:
        for t, p, R in zip(times, pos, rot):
            w, x, y, z = rot_to_quat(R)
            f.write(" ".join(repr(float(v)) for v in (t, p[0], p[1], p[2], x, y, z, w)) + "\n")


def read_tum(path) -> Trajectory:
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.replace(",", " ").split()
            if len(parts) != 8:
                raise MetricsError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as e:
                raise MetricsError(f"{path}:{ln}: {e}") from None
    if not rows:
        raise MetricsError(f"{path}: no poses")
    a = np.array(rows)
    rot = np.array([quat_to_rot([q[3], q[0], q[1], q[2]]) for q in a[:, 4:8]])
    return Trajectory(a[:, 0], a[:, 1:4], rot)


def associate(t_a: np.ndarray, t_b: np.ndarray, tol: float = ASSOC_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-timestamp pairs (index into a, index into b) within ``tol``."""
    t_b = np.asarray(t_b)
    order = np.argsort(t_b, kind="stable")
    sb = t_b[order]
    j = np.clip(np.searchsorted(sb, t_a), 1, len(sb) - 1) if len(sb) > 1 else np.zeros(len(t_a), dtype=int)
    if len(sb) > 1:
        left = np.abs(t_a - sb[j - 1]) <= np.abs(sb[j] - t_a)
        j = np.where(left, j - 1, j)
    ok = np.abs(sb[j] - t_a) <= tol
    return np.flatnonzero(ok), order[j[ok]]


def umeyama(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) minimising sum |R src + t - dst|^2; no scale."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def evaluate(est: Trajectory, gt: Trajectory, alignment: str = "none", planar: bool = False) -> MetricsReport:
    if alignment not in ("none", "rigid"):
        raise MetricsError(f"unknown alignment {alignment!r}")
    ia, ib = associate(est.times, gt.times)
    if len(ia) < 2:
        raise MetricsError(f"only {len(ia)} associated poses (need >= 2)")
    pe, pg = est.pos[ia].copy(), gt.pos[ib].copy()
    Re, Rg = est.rot[ia], gt.rot[ib]
    if planar:
        pe[:, 2] = 0.0
        pg[:, 2] = 0.0
    if alignment == "rigid":
        R, t = umeyama(pe, pg)
        if planar:
            # keep the alignment in the plane
            yaw = np.arctan2(R[1, 0], R[0, 0])
            c, s = np.cos(yaw), np.sin(yaw)
            R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
            t = pg.mean(axis=0) - R @ pe.mean(axis=0)
            t[2] = 0.0
        pe = pe @ R.T + t
        Re = np.einsum("ij,njk->nik", R, Re)
    err = np.linalg.norm(pe - pg, axis=1)
    ape = float(np.sqrt(np.mean(err**2)))
    # relative errors between consecutive associated poses
    dte, dtg = np.einsum("nji,nj->ni", Re[:-1], pe[1:] - pe[:-1]), np.einsum("nji,nj->ni", Rg[:-1], pg[1:] - pg[:-1])
    dRe = np.einsum("nji,njk->nik", Re[:-1], Re[1:])
    dRg = np.einsum("nji,njk->nik", Rg[:-1], Rg[1:])
    # error transform E = dG^-1 dE
    rt = np.linalg.norm(np.einsum("nji,nj->ni", dRg, dte - dtg), axis=1)
    rr = np.degrees([np.linalg.norm(so3_log(a.T @ b)) for a, b in zip(dRg, dRe)])
    if planar:
        rt = np.linalg.norm((dte - dtg)[:, :2], axis=1)
    length = float(np.sum(np.linalg.norm(np.diff(pg, axis=0), axis=1)))
    return MetricsReport(
        ape_rmse=ape, rpe_trans=float(np.sqrt(np.mean(rt**2))), rpe_rot_deg=float(np.sqrt(np.mean(np.square(rr)))),
        length=length, alignment=alignment, planar=planar, n_pairs=int(len(ia)),
        ape_series=err, rpe_trans_series=rt, rpe_rot_series=np.asarray(rr), times=est.times[ia],
    )


def evaluate_files(traj_file, gt_file, alignment: str = "none", planar: bool = False) -> MetricsReport:
    return evaluate(read_tum(traj_file), read_tum(gt_file), alignment, planar)
