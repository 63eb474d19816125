"""Scans per second against scan size, odometry and SLAM modes.

    python scripts/throughput.py [--sizes 1000 2500 5000 10000]
"""

import argparse
import copy
import tempfile
from pathlib import Path

from dopplerio.pipeline import PipelineConfig, run_pipeline
from dopplerio.simulator import scenario_library, simulate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", type=int, nargs="+", default=[1000, 2500, 5000, 10000])
    ap.add_argument("--scenario", default="highspeed_lidar")
    a = ap.parse_args()
    tmp = Path(tempfile.mkdtemp(prefix="throughput_"))
    print(f"{'points':>7s} {'odometry [scan/s]':>18s} {'slam [scan/s]':>14s}")
    for n in a.sizes:
        sc = copy.deepcopy(scenario_library()[a.scenario])
        sc.sensor.points_per_scan = n
        r = simulate(sc, tmp / str(n))
        rates = []
        for mode in ("odometry", "slam"):
            res = run_pipeline(r.path, PipelineConfig(mode=mode))
            rates.append(len(res.times) / res.runtime)
        print(f"{n:7d} {rates[0]:18.1f} {rates[1]:14.1f}")


if __name__ == "__main__":
    main()
