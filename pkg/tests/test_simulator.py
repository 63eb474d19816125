import numpy as np
import pytest

from dopplerio.manifold import so3_log
from dopplerio.metrics import read_tum
from dopplerio.sensors import Label, open_log
from dopplerio.simulator import ScenarioError, SimScenario, scenario_library, simulate, true_sensor_velocity


def _short(name, duration=2.0):
    return scenario_library()[name].replace(duration=duration)


def test_library_contents():
    lib = scenario_library()
    for name in ("static_room", "straight_const_v", "figure_eight_loop", "dynamic_crossing", "calib_perturbed",
                 "highspeed_lidar"):
        assert name in lib
        lib[name].validate()


def test_deterministic(tmp_path):
    sc = _short("dynamic_crossing")
    a, b = simulate(sc, tmp_path / "a"), simulate(sc, tmp_path / "b")
    for fa, fb in zip(sorted((tmp_path / "a").rglob("*.*")), sorted((tmp_path / "b").rglob("*.*"))):
        assert fa.name == fb.name and fa.read_bytes() == fb.read_bytes()
    assert simulate(sc.replace(seed=99)).scans[3].xyz.tolist() != a.scans[3].xyz.tolist()


def test_noiseless_dopplers_match_truth():
    r = simulate(_short("straight_const_v").noiseless())
    tr = r.truth
    for k in (3, 10):
        scan, lab = r.scans[k], tr.labels[k]
        s = lab == Label.STATIC
        pred = -(scan.directions()[s] @ tr.sensor_vel[k])
        assert np.abs(pred - scan.doppler[s]).max() < 1e-9


def test_imu_consistent_with_trajectory():
    """Integrating noiseless IMU samples reproduces the true motion (finite-difference self check)."""
    r = simulate(_short("figure_eight_loop", 3.0).noiseless())
    tr = r.truth
    imu = r.imu
    i0 = int(np.argmin(abs(tr.times - imu[0].t)))
    R, p, v = tr.rot[i0], tr.pos[i0], tr.vel[i0]
    for a, b in zip(imu[:-1], imu[1:]):
        dt = b.t - a.t
        from dopplerio.manifold import so3_exp
        acc = R @ a.accel + tr.gravity
        p = p + v * dt + 0.5 * acc * dt * dt
        v = v + acc * dt
        R = R @ so3_exp(a.gyro * dt)
    j = int(np.argmin(abs(tr.times - imu[-1].t)))
    assert np.linalg.norm(p - tr.pos[j]) < 0.05
    assert np.linalg.norm(so3_log(R.T @ tr.rot[j])) < 1e-3


def test_dynamic_share_and_labels():
    r = simulate(_short("dynamic_crossing", 4.0))
    share = np.mean(np.concatenate(r.truth.labels) == Label.DYNAMIC)
    assert share >= 0.5


def test_written_log_reads_back(tmp_path):
    r = simulate(_short("static_room"), tmp_path / "log")
    stream = open_log(tmp_path / "log")
    assert len(stream.scan_files) == len(r.scans)
    gt = read_tum(tmp_path / "log" / "gt_trajectory.tum")
    i = int(np.argmin(abs(gt.times - r.truth.scan_times[0])))
    assert np.allclose(gt.pos[i], 0, atol=1e-12)
    assert abs(np.arctan2(gt.rot[i][1, 0], gt.rot[i][0, 0])) < 1e-12


def test_invalid_scenarios():
    sc = SimScenario()
    sc.trajectory.speed_knots = [[0.0, 1.0], [0.0, 2.0]]
    with pytest.raises(ScenarioError):
        sc.validate()
    with pytest.raises(ScenarioError):
        SimScenario(duration=-1).validate()


def test_scenario_toml_round_trip(tmp_path):
    sc = scenario_library()["calib_perturbed"]
    sc.save(tmp_path / "s.toml")
    assert SimScenario.load(tmp_path / "s.toml").to_dict() == sc.to_dict()


def test_true_sensor_velocity_frame():
    r = simulate(_short("straight_const_v").noiseless())
    tr = r.truth
    k = 5
    v = true_sensor_velocity(r.trajectory, tr.scan_times[k], tr.ext_rot, tr.ext_pos)
    assert np.allclose(v, tr.sensor_vel[k])
