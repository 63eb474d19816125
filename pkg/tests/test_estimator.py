import numpy as np
import pytest

from conftest import numeric_jacobian, random_state, rel_err
from dopplerio.estimator import (
    InsufficientCorrespondenceError, UpdateConfig, associate, build_residuals, evaluate, iekf_update,
)
from dopplerio.manifold import STATE_DIM, NavState, boxplus
from dopplerio.mapping import MapIndex
from dopplerio.propagation import StateWithCov, sensor_velocity
from dopplerio.sensors import Label, NoiseParams, Scan

NOISE = NoiseParams(point_sigma=0.02, doppler_sigma=0.05)


def _room(rng, n=3000):
    """Points on the floor and three walls of a box around the origin."""
    u = rng.uniform(-8, 8, (n, 2))
    k = rng.integers(0, 4, n)
    pts = np.zeros((n, 3))
    pts[k == 0] = np.c_[u[k == 0], np.full((k == 0).sum(), -1.0)]
    pts[k == 1] = np.c_[np.full((k == 1).sum(), 8.0), u[k == 1]]
    pts[k == 2] = np.c_[u[k == 2, 0], np.full((k == 2).sum(), 8.0), u[k == 2, 1]]
    pts[k == 3] = np.c_[u[k == 3, 0], np.full((k == 3).sum(), -8.0), u[k == 3, 1]]
    return pts


def _scan_for(state: NavState, world_pts, gyro, rng, n=300, noise=0.0):
    sel = world_pts[rng.choice(len(world_pts), n, replace=False)]
    m = state.sensor_pose().inverse().apply(sel)
    r = m / np.linalg.norm(m, axis=1, keepdims=True)
    dop = -(r @ sensor_velocity(state, gyro)) + rng.normal(0, noise, n)
    return Scan.from_arrays(1.0, "radar", m + rng.normal(0, noise, m.shape), dop, label=np.full(n, Label.STATIC))


def test_residual_jacobians_match_finite_differences(rng):
    world = _room(rng)
    index = MapIndex(0.2)
    index.insert(world)
    cfg = UpdateConfig(plane_threshold=0.5, max_geo_residual=100.0, max_neighbor_dist=3.0)
    for _ in range(5):
        x = random_state(rng, 0.1).with_(pos=rng.normal(size=3) * 0.3)
        gyro = rng.normal(size=3) * 0.3
        scan = _scan_for(x, world, gyro, rng)
        assoc = associate(scan, x, index, cfg, NOISE)
        base = evaluate(scan, x, assoc, gyro, cfg, NOISE, 0.1)
        ok = base.geo_valid
        assert ok.sum() > 50

        def geo(d):
            return evaluate(scan, boxplus(x, d), assoc, gyro, cfg, NOISE, 0.1, jacobians=False).geo_r[ok]

        def dop(d):
            return evaluate(scan, boxplus(x, d), assoc, gyro, cfg, NOISE, 0.1, jacobians=False).dop_r

        assert rel_err(base.geo_H[ok], numeric_jacobian(geo, STATE_DIM)) < 1e-5
        assert rel_err(base.dop_H, numeric_jacobian(dop, STATE_DIM)) < 1e-5


def test_update_pulls_perturbed_state_back(rng):
    world = _room(rng, 20000)
    index = MapIndex(0.1)
    index.insert(world)
    truth = NavState(vel=np.array([2.0, 0.3, 0.0]))
    gyro = np.zeros(3)
    scan = _scan_for(truth, world, gyro, rng, n=800, noise=0.0)
    d = np.zeros(STATE_DIM)
    d[0:3] = [0.01, -0.01, 0.02]
    d[3:6] = [0.15, -0.1, 0.05]
    d[12:15] = [0.3, -0.2, 0.1]
    P = np.diag(np.r_[[1e-2] * 6, [1e-12] * 6, [1.0] * 3, [1e-8] * 9])
    cfg = UpdateConfig(estimate_extrinsic=False, max_iterations=8)
    post, diag = iekf_update(StateWithCov(boxplus(truth, d), P, 1.0), scan, index, gyro, cfg, NOISE, 0.1)
    assert np.linalg.norm(post.state.pos - truth.pos) < 0.02
    assert np.linalg.norm(post.state.vel - truth.vel) < 0.02
    assert diag.iterations >= 1 and not diag.diverged
    # posterior covariance contracts and stays symmetric
    assert np.trace(post.cov[3:6, 3:6]) < np.trace(P[3:6, 3:6])
    assert np.allclose(post.cov, post.cov.T)


def test_too_few_points_raises(rng):
    index = MapIndex(0.2)
    index.insert(_room(rng))
    scan = Scan.from_arrays(1.0, "radar", rng.normal(size=(3, 3)) + 20, np.zeros(3), label=np.full(3, Label.STATIC))
    with pytest.raises(InsufficientCorrespondenceError):
        build_residuals(scan, StateWithCov(NavState(), np.eye(STATE_DIM), 1.0), index, np.zeros(3),
                        UpdateConfig(), NOISE)


def test_config_validation():
    with pytest.raises(ValueError):
        UpdateConfig(max_iterations=0)
    with pytest.raises(ValueError):
        UpdateConfig(sigma_interval_mode="bogus")
