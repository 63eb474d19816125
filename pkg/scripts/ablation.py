"""Ablation table: SLAM with every switch on, then each switch off in turn.

    python scripts/ablation.py [scenario] [--seeds N]

APE is reported both without alignment and after a rigid fit; the initial
tilt is only as good as the accelerometer average at rest, so the raw column
carries a slow vertical climb that the rigid fit removes.
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from dopplerio.cli import ABLATIONS
from dopplerio.metrics import Trajectory, evaluate
from dopplerio.pipeline import PipelineConfig, apply_overrides, run_pipeline
from dopplerio.simulator import scenario_library, simulate, truth_in_odometry_frame

BASE = ['mode="slam"', "velocity_filter=true", "doppler_residual=true", "online_calibration=true",
        "loop_closure=true"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("scenario", nargs="?", default="dynamic_crossing")
    ap.add_argument("--seeds", type=int, default=1)
    a = ap.parse_args()
    sc = scenario_library()[a.scenario]
    tmp = Path(tempfile.mkdtemp(prefix="ablation_"))
    table = {name: [] for name, _ in ABLATIONS}
    for s in range(a.seeds):
        r = simulate(sc.replace(seed=sc.seed + s), tmp / f"seed{s}")
        gt = truth_in_odometry_frame(r.truth, float(r.truth.scan_times[0]))
        for name, toggles in ABLATIONS:
            cfg = apply_overrides(PipelineConfig(), BASE + [f"{k}={str(v).lower()}" for k, v in toggles.items()])
            res = run_pipeline(r.path, cfg)
            if res.failed:
                table[name].append((np.nan, np.nan))
                continue
            est = Trajectory(res.times, res.pos, res.rot)
            table[name].append((evaluate(est, gt).ape_rmse, evaluate(est, gt, "rigid").ape_rmse))
    print(f"{a.scenario}, {a.seeds} seed(s)")
    print(f"{'variant':24s} {'APE raw [m]':>12s} {'APE rigid [m]':>14s}")
    for name, vals in table.items():
        raw, rigid = np.nanmean(np.array(vals), axis=0)
        print(f"{name:24s} {raw:12.3f} {rigid:14.3f}")


if __name__ == "__main__":
    main()
