"""Two-stage motion compensation of sequentially sampled (LiDAR) scans.

Radar frames are captured instantaneously and pass through untouched.
"""

from __future__ import annotations

import numpy as np

from .manifold import NavState
from .propagation import PropagationLog, predicted_velocity_at, relative_poses
from .sensors import Scan, SensorKind

# relative motion below this is treated as none, keeping such points bit-exact
MOTION_EPS = 1e-12


def _needs_work(scan: Scan) -> bool:
    return scan.kind == SensorKind.FMCW_LIDAR and len(scan) > 0 and bool(np.any(scan.offset_t != 0.0))


def sensor_motion(scan: Scan, plog: PropagationLog, state: NavState | None = None):
    """Per-point transform (R, t) from the sensor frame at the point's time
    to the sensor frame at scan end, plus a mask of points that moved."""
    state = state or plog.end_state
    # points share timestamps per firing column; evaluate once per distinct time
    times, inv = np.unique(scan.end_time + scan.offset_t, return_inverse=True)
    Rb, tb = relative_poses(plog, times, state)
    Rs, ps = state.ext_rot, state.ext_pos
    # T_bs^-1 * T_rel * T_bs
    R = (Rs.T @ Rb @ Rs)[inv]
    t = ((Rb @ ps + tb - ps) @ Rs)[inv]
    moved = (np.abs(R - np.eye(3)).reshape(len(R), -1).max(axis=1) > MOTION_EPS) | (np.abs(t).max(axis=1) > MOTION_EPS)
    return R, t, moved


def compensate_geometry(scan: Scan, plog: PropagationLog, state: NavState | None = None) -> Scan:
    """Re-express every point in the sensor frame at scan end."""
    if not _needs_work(scan) or scan.deskewed:
        return scan.copy()
    R, t, moved = sensor_motion(scan, plog, state)
    xyz = scan.xyz.copy()
    xyz[moved] = np.einsum("nij,nj->ni", R[moved], scan.xyz[moved]) + t[moved]
    return scan.copy(xyz=xyz, deskewed=True)


def compensate_doppler(scan: Scan, plog: PropagationLog, state: NavState | None = None) -> Scan:
    """Remove the sensor's own velocity change over the scan from each doppler.

    The corrected value is what the sensor would have read at scan end for a
    static target:  d + r_j . v(t_j) - r_end . v(t_end), with r_j the ray at
    sampling time and r_end the ray after geometric compensation.
    """
    if not _needs_work(scan):
        return scan.copy()
    state = state or plog.end_state
    R, t, moved = sensor_motion(scan, plog, state)
    if scan.deskewed:
        end_xyz = scan.xyz
        raw_xyz = scan.xyz.copy()
        raw_xyz[moved] = np.einsum("nji,nj->ni", R[moved], scan.xyz[moved] - t[moved])
    else:
        raw_xyz = scan.xyz
        end_xyz = np.einsum("nij,nj->ni", R, scan.xyz) + t
    r_raw = raw_xyz / np.linalg.norm(raw_xyz, axis=1, keepdims=True)
    r_end = end_xyz / np.linalg.norm(end_xyz, axis=1, keepdims=True)
    v_pt = predicted_velocity_at(plog, state, scan.end_time + scan.offset_t)
    v_end = predicted_velocity_at(plog, state, scan.end_time)
    corr = np.einsum("ij,ij->i", r_raw, v_pt) - r_end @ v_end
    dop = scan.doppler.copy()
    dop[moved] = dop[moved] + corr[moved]
    return scan.copy(doppler=dop)
