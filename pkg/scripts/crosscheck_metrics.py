"""Compare dopplerio APE / RPE with the `evo` package on the same TUM files.

    pip install evo
    python scripts/crosscheck_metrics.py [--log-dir DIR]

Without --log-dir a short static_room log is simulated and run first.  A few
synthetic trajectory pairs with random time offsets and drift are checked too.
Exits non-zero if any metric differs by more than 1e-6.
"""

import argparse
import sys
import tempfile
from pathlib import Path

import numpy as np
from evo.core import metrics as evo_metrics
from evo.core import sync
from evo.core.geometry import GeometryException
from evo.tools import file_interface

from dopplerio.manifold import so3_exp
from dopplerio.metrics import Trajectory, evaluate_files, write_tum
from dopplerio.pipeline import PipelineConfig, run_pipeline
from dopplerio.simulator import scenario_library, simulate

TOL = 1e-6


def evo_reference(est_file, gt_file, align):
    ref = file_interface.read_tum_trajectory_file(str(gt_file))
    est = file_interface.read_tum_trajectory_file(str(est_file))
    ref, est = sync.associate_trajectories(ref, est, max_diff=0.01)
    if align == "rigid":
        est.align(ref, correct_scale=False)
    ape = evo_metrics.APE(evo_metrics.PoseRelation.translation_part)
    ape.process_data((ref, est))
    out = {"ape_rmse_m": ape.get_statistic(evo_metrics.StatisticsType.rmse)}
    for key, rel in [("rpe_trans_m", evo_metrics.PoseRelation.translation_part),
                     ("rpe_rot_deg", evo_metrics.PoseRelation.rotation_angle_deg)]:
        rpe = evo_metrics.RPE(rel, delta=1, delta_unit=evo_metrics.Unit.frames, all_pairs=False)
        rpe.process_data((ref, est))
        out[key] = rpe.get_statistic(evo_metrics.StatisticsType.rmse)
    return out


def synthetic_pair(rng, folder, n=400):
    t = np.arange(n) * 0.1
    rv = np.cumsum(rng.normal(scale=0.05, size=(n, 3)), axis=0)
    gt = Trajectory(t, np.cumsum(rng.normal(size=(n, 3)), axis=0), np.array([so3_exp(v) for v in rv]))
    drift = np.cumsum(rng.normal(scale=0.02, size=(n, 3)), axis=0)
    noise = np.array([so3_exp(rng.normal(scale=0.01, size=3)) for _ in range(n)])
    Ra, ta = so3_exp(rng.normal(size=3)), rng.normal(size=3) * 5
    est = Trajectory(t + rng.uniform(-0.004, 0.004, n), (gt.pos + drift) @ Ra.T + ta,
                     np.einsum("ij,njk,nkl->nil", Ra, gt.rot, noise))
    write_tum(folder / "gt.tum", gt.times, gt.pos, gt.rot)
    write_tum(folder / "est.tum", est.times, est.pos, est.rot)
    return folder / "est.tum", folder / "gt.tum"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--log-dir")
    a = ap.parse_args()
    tmp = Path(tempfile.mkdtemp(prefix="xcheck_"))
    if a.log_dir:
        log_dir = Path(a.log_dir)
    else:
        log_dir = simulate(scenario_library()["static_room"].replace(duration=3.0), tmp / "log").path
    run_pipeline(log_dir, PipelineConfig()).write(tmp / "run")
    cases = [("pipeline", tmp / "run" / "trajectory.tum", log_dir / "gt_trajectory.tum")]
    rng = np.random.default_rng(7)
    for k in range(3):
        (tmp / f"syn{k}").mkdir()
        cases.append((f"synthetic {k}", *synthetic_pair(rng, tmp / f"syn{k}")))

    worst = 0.0
    for name, est_file, gt_file in cases:
        for align in ("none", "rigid"):
            ours = evaluate_files(est_file, gt_file, align).summary()
            try:
                ref = evo_reference(est_file, gt_file, align)
            except GeometryException as e:
                # evo refuses rank-deficient (e.g. planar) point sets for alignment
                print(f"{name:12s} {align:5s} skipped: evo: {e}")
                continue
            for key, v in ref.items():
                d = abs(ours[key] - v)
                worst = max(worst, d)
                print(f"{name:12s} {align:5s} {key:12s} dopplerio {ours[key]:.9f}  evo {v:.9f}  |diff| {d:.1e}")
    print(f"largest difference {worst:.2e} (tolerance {TOL:g})")
    return 0 if worst <= TOL else 1


if __name__ == "__main__":
    sys.exit(main())
