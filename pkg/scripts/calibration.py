"""Online extrinsic calibration from a perturbed prior, and its refusal on straight driving.

    python scripts/calibration.py
"""

import math
import tempfile
from pathlib import Path

import numpy as np

from dopplerio.manifold import so3_log
from dopplerio.pipeline import PipelineConfig, run_pipeline
from dopplerio.simulator import scenario_library, simulate


def ext_error(rot, trans, truth):
    return math.degrees(np.linalg.norm(so3_log(truth.ext_rot.T @ rot))), float(np.linalg.norm(trans - truth.ext_pos))


def main():
    lib = scenario_library()
    tmp = Path(tempfile.mkdtemp(prefix="calib_"))
    for name in ["calib_perturbed", "straight_const_v"]:
        r = simulate(lib[name], tmp / name)
        res = run_pipeline(r.path, PipelineConfig(mode="slam", online_calibration=True))
        c = res.calibration
        e0 = ext_error(np.asarray(r.meta.ext_rot), np.asarray(r.meta.ext_pos), r.truth)
        print(f"{name}: prior error {e0[0]:.2f} deg / {e0[1]:.3f} m; calibration {c.status} ({c.message})")
        if c.status == "accepted":
            e1 = ext_error(c.extrinsic.rot, c.extrinsic.trans, r.truth)
            print(f"  estimate error {e1[0]:.3f} deg / {e1[1]:.3f} m")


if __name__ == "__main__":
    main()
