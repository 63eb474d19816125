"""Odometry vs SLAM on the drifting figure-eight, plus false loops on a straight drive.

    python scripts/loop_closure.py
"""

import tempfile
from pathlib import Path

from dopplerio.metrics import Trajectory, evaluate
from dopplerio.pipeline import PipelineConfig, run_pipeline
from dopplerio.simulator import scenario_library, simulate, truth_in_odometry_frame


def main():
    lib = scenario_library()
    tmp = Path(tempfile.mkdtemp(prefix="loops_"))
    for name in ["figure_eight_drift", "figure_eight_loop", "straight_const_v"]:
        r = simulate(lib[name], tmp / name)
        gt = truth_in_odometry_frame(r.truth, float(r.truth.scan_times[0]))
        for mode in ("odometry", "slam"):
            res = run_pipeline(r.path, PipelineConfig(mode=mode))
            m = evaluate(Trajectory(res.times, res.pos, res.rot), gt)
            print(f"{name:20s} {mode:8s} APE {m.ape_rmse:7.3f} m  RPE {m.rpe_trans:.4f} m  loops {len(res.loops)}")


if __name__ == "__main__":
    main()
