import numpy as np

from dopplerio.compensation import compensate_doppler, compensate_geometry
from dopplerio.manifold import STATE_DIM, NavState, so3_exp
from dopplerio.propagation import StateWithCov, propagate_forward, sensor_velocity, states_at
from dopplerio.sensors import ImuSample, NoiseParams, Scan


def _interval(x0, gyro, accel, n=11, dt=0.01):
    imu = [ImuSample(k * dt, np.asarray(gyro, float), np.asarray(accel, float)) for k in range(n)]
    return propagate_forward(StateWithCov(x0, np.eye(STATE_DIM) * 1e-6, 0.0), imu[1:], NoiseParams(), last=imu[0])


def test_radar_passes_through_bit_identical(rng):
    x0 = NavState(vel=np.array([10.0, 0, 0]), ext_pos=np.array([0.5, 0, 0.3]))
    swc, plog = _interval(x0, [0, 0, 0.3], [1, 0, 9.81])
    scan = Scan.from_arrays(0.1, "radar", rng.normal(size=(50, 3)) * 10, rng.normal(size=50))
    for f in (compensate_geometry, compensate_doppler):
        out = f(scan, plog, swc.state)
        assert out.xyz.tobytes() == scan.xyz.tobytes() and out.doppler.tobytes() == scan.doppler.tobytes()


def test_stationary_sensor_changes_nothing(rng):
    swc, plog = _interval(NavState(), [0, 0, 0], [0, 0, 9.81])
    scan = Scan.from_arrays(0.1, "fmcw_lidar", rng.normal(size=(50, 3)) * 10, rng.normal(size=50),
                            offset_t=-rng.uniform(0, 0.1, 50))
    out = compensate_doppler(compensate_geometry(scan, plog, swc.state), plog, swc.state)
    assert np.array_equal(out.xyz, scan.xyz) and np.array_equal(out.doppler, scan.doppler)


def test_deskew_recovers_static_world_points(rng):
    """Points sampled at their own times land where the end-pose sensor would see them."""
    x0 = NavState(rot=so3_exp([0.02, -0.01, 0.3]), vel=np.array([30.0, 1.0, 0.0]),
                  ext_rot=so3_exp([0, 0, 0.05]), ext_pos=np.array([0.5, 0.1, 0.4]))
    swc, plog = _interval(x0, [0.01, 0.02, 0.5], [2.0, 0.5, 9.81])
    end = swc.state
    world = rng.uniform(-40, 40, (200, 3))
    off = -rng.uniform(0, 0.1, 200)
    R, p, v = states_at(plog, 0.1 + off)
    Rs, ps = end.ext_rot, end.ext_pos
    m = np.einsum("nji,nj->ni", R @ Rs, world - (p + np.einsum("nij,j->ni", R, ps)))
    scan = Scan.from_arrays(0.1, "fmcw_lidar", m, np.zeros(200), offset_t=off)
    out = compensate_geometry(scan, plog, end)
    expect = end.sensor_pose().inverse().apply(world)
    assert np.abs(out.xyz - expect).max() < 1e-9
    # the doppler stage maps raw sampled dopplers to the end-of-scan reading
    gyro = plog.sample_gyro[np.clip(np.searchsorted(plog.sample_t, 0.1 + off, side="right") - 1, 0, None)]
    vs = sensor_velocity(end, gyro, R, v)
    dop = -np.einsum("ij,ij->i", m / np.linalg.norm(m, axis=1, keepdims=True), vs)
    d_out = compensate_doppler(scan.copy(doppler=dop), plog, end)
    want = -(expect / np.linalg.norm(expect, axis=1, keepdims=True)) @ sensor_velocity(end, plog.sample_gyro[-1])
    assert np.abs(d_out.doppler - want).max() < 1e-9


def test_geometry_stage_is_a_fixed_point(rng):
    swc, plog = _interval(NavState(vel=np.array([20.0, 0, 0])), [0, 0, 0.2], [0, 0, 9.81])
    scan = Scan.from_arrays(0.1, "fmcw_lidar", rng.normal(size=(30, 3)) * 10, np.zeros(30), offset_t=-rng.uniform(0, 0.1, 30))
    once = compensate_geometry(scan, plog, swc.state)
    twice = compensate_geometry(once, plog, swc.state)
    assert np.array_equal(once.xyz, twice.xyz) and once.deskewed
