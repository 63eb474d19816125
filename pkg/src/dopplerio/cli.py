"""Command line driver: simulate, run, eval, ablate.

Exit codes: 0 success, 2 input error, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .metrics import MetricsError, Trajectory, evaluate, evaluate_files, read_tum
from .pipeline import PipelineConfig, apply_overrides, run_pipeline
from .sensors import LogFormatError, StreamError
from .simulator import ScenarioError, SimScenario, scenario_library, simulate

log = logging.getLogger("dopplerio")

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION = 0, 2, 3

# the four switches of the ablation table, each turned off in turn
ABLATIONS = [
    ("full", {}),
    ("w/o velocity filter", {"velocity_filter": False}),
    ("w/o doppler residual", {"doppler_residual": False}),
    ("w/o online calibration", {"online_calibration": False}),
    ("w/o loop closure", {"loop_closure": False}),
]


class InputError(Exception):
    pass


def _load_scenario(name: str) -> SimScenario:
    lib = scenario_library()
    if name in lib:
        return lib[name]
    p = Path(name)
    if p.suffix == ".toml" and p.exists():
        return SimScenario.load(p)
    raise InputError(f"unknown scenario {name!r}; library: {', '.join(sorted(lib))}")


def _load_config(path, overrides, mode=None) -> PipelineConfig:
    cfg = PipelineConfig.load(path) if path else PipelineConfig()
    if mode:
        overrides = [f'mode="{mode}"'] + list(overrides)
    return apply_overrides(cfg, overrides) if overrides else cfg


def cmd_simulate(a) -> int:
    sc = _load_scenario(a.scenario)
    if a.seed is not None:
        sc = sc.replace(seed=a.seed)
    if a.duration is not None:
        sc = sc.replace(duration=a.duration)
    if a.noiseless:
        sc = sc.noiseless()
    res = simulate(sc, a.output)
    print(f"wrote {len(res.scans)} scans, {len(res.imu)} IMU samples to {res.path}")
    return EXIT_OK


def cmd_run(a) -> int:
    cfg = _load_config(a.config, a.set, a.mode)
    res = run_pipeline(a.log_dir, cfg, doppler_debug=a.doppler_debug)
    res.write(a.output, map_format=a.map_format)
    print(f"{len(res.frames)} frames, {len(res.keyframes)} keyframes, {len(res.loops)} loops "
          f"in {res.runtime:.2f} s -> {a.output}")
    if res.calibration is not None:
        print(f"calibration: {res.calibration.status} ({res.calibration.message})")
    if res.failed:
        print(f"estimation failed: {res.failed}", file=sys.stderr)
        return EXIT_ESTIMATION
    return EXIT_OK


def cmd_eval(a) -> int:
    rep = evaluate_files(a.trajectory, a.groundtruth, a.align, a.planar)
    for k, v in rep.summary().items():
        print(f"{k:12s} {v}")
    if a.output:
        rep.write(a.output)
    return EXIT_OK


def cmd_ablate(a) -> int:
    base = _load_config(a.config, a.set, "slam")
    base = apply_overrides(base, ["velocity_filter=true", "doppler_residual=true", "online_calibration=true",
                                  "loop_closure=true"])
    gt_path = Path(a.log_dir) / "gt_trajectory.tum"
    gt = read_tum(gt_path) if gt_path.exists() else None
    rows, worst = [], EXIT_OK
    for name, toggles in ABLATIONS:
        cfg = apply_overrides(base, [f"{k}={str(v).lower()}" for k, v in toggles.items()])
        res = run_pipeline(a.log_dir, cfg)
        if a.output:
            res.write(Path(a.output) / name.replace("/", "").replace(" ", "_"))
        raw = rigid = float("nan")
        if gt is not None and not res.failed:
            est = Trajectory(res.times, res.pos, res.rot)
            raw = evaluate(est, gt, "none").ape_rmse
            rigid = evaluate(est, gt, "rigid").ape_rmse
        if res.failed:
            worst = EXIT_ESTIMATION
        rows.append((name, raw, rigid, len(res.loops), res.failed or "ok"))
    print(f"{'variant':24s} {'APE raw [m]':>12s} {'APE rigid [m]':>14s} {'loops':>6s}  status")
    for name, raw, rigid, nl, st in rows:
        print(f"{name:24s} {raw:12.3f} {rigid:14.3f} {nl:6d}  {st}")
    return worst


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dopplerio", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesise a sensor log with ground truth")
    s.add_argument("scenario", help="library name or scenario .toml")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--noiseless", action="store_true")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="odometry / SLAM over a log directory")
    r.add_argument("log_dir")
    r.add_argument("-c", "--config")
    r.add_argument("-o", "--output", required=True)
    r.add_argument("--mode", choices=["odometry", "slam"])
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config entry, e.g. --set update.max_iterations=6")
    r.add_argument("--doppler-debug", action="store_true", help="dump per-point doppler diagnostics")
    r.add_argument("--map-format", choices=["pcd", "csv"], default="pcd")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="APE / RPE of a TUM trajectory against ground truth")
    e.add_argument("trajectory")
    e.add_argument("groundtruth")
    e.add_argument("--align", choices=["none", "rigid"], default="none")
    e.add_argument("--planar", action="store_true")
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("ablate", help="run the ablation toggles and tabulate APE")
    b.add_argument("log_dir")
    b.add_argument("-c", "--config")
    b.add_argument("-o", "--output")
    b.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(a.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except (InputError, ScenarioError, LogFormatError, StreamError, MetricsError, FileNotFoundError,
            NotADirectoryError, ValueError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
