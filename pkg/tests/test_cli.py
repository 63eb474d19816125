import numpy as np
import pytest

from dopplerio.cli import main
from dopplerio.sensors import ImuSample, LogMeta, Scan, write_log


@pytest.fixture(scope="module")
def room(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "room"
    assert main(["simulate", "static_room", "-o", str(d), "--duration", "1.5"]) == 0
    return d


def test_run_and_eval(room, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(room), "-o", str(out), "--set", "update.max_iterations=3"]) == 0
    for name in ("trajectory.tum", "map.pcd", "diagnostics.csv", "summary.toml", "timing.toml"):
        assert (out / name).exists()
    assert main(["eval", str(out / "trajectory.tum"), str(room / "gt_trajectory.tum"), "--align", "rigid",
                 "-o", str(tmp_path / "m")]) == 0
    assert "ape_rmse_m" in capsys.readouterr().out
    assert (tmp_path / "m" / "metrics.toml").exists()


def test_config_file_round_trip(room, tmp_path):
    from dopplerio.pipeline import PipelineConfig

    cfg = PipelineConfig(mode="slam")
    cfg.save(tmp_path / "c.toml")
    assert PipelineConfig.load(tmp_path / "c.toml") == cfg
    assert main(["run", str(room), "-c", str(tmp_path / "c.toml"), "-o", str(tmp_path / "o"),
                 "--map-format", "csv"]) == 0
    assert (tmp_path / "o" / "map.csv").exists()


@pytest.mark.parametrize("argv", [
    ["simulate", "no_such_scenario", "-o", "x"],
    ["run", "/nonexistent/log", "-o", "x"],
    ["eval", "/nonexistent/a.tum", "/nonexistent/b.tum"],
])
def test_input_errors_exit_2(argv, tmp_path, capsys):
    argv = [a if a != "x" else str(tmp_path / "x") for a in argv]
    assert main(argv) == 2
    assert "input error" in capsys.readouterr().err


def test_bad_override_exit_2(room, tmp_path):
    assert main(["run", str(room), "-o", str(tmp_path / "o"), "--set", "no_such_key=1"]) == 2
    assert main(["run", str(room), "-o", str(tmp_path / "o"), "--set", "update.max_iterations=0"]) == 2


def test_estimation_failure_exit_3(tmp_path):
    rng = np.random.default_rng(0)
    imu = [ImuSample(k * 0.01, np.zeros(3), np.array([0, 0, 9.81])) for k in range(1, 31)]
    imu[15] = ImuSample(imu[15].t, np.zeros(3), np.array([1e308, 1e308, 1e308]))
    scans = [Scan.from_arrays(0.1 * (i + 1), "radar", rng.uniform(2, 20, (50, 3)), np.zeros(50)) for i in range(3)]
    write_log(tmp_path / "log", imu, scans, LogMeta())
    assert main(["run", str(tmp_path / "log"), "-o", str(tmp_path / "o")]) == 3
    assert "failed" in (tmp_path / "o" / "summary.toml").read_text()
