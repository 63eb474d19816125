import numpy as np
import pytest

from conftest import numeric_jacobian, random_state, rel_err
from dopplerio.manifold import STATE_DIM, NavState, boxminus, boxplus
from dopplerio.propagation import (
    PropagationError, StateWithCov, imu_step, propagate_backward, propagate_forward, states_at, step_jacobians,
)
from dopplerio.sensors import ImuSample, NoiseParams


def _samples(rng, n=21, t0=0.0, dt=0.01):
    return [ImuSample(t0 + k * dt, rng.normal(size=3) * 0.5, rng.normal(size=3) + [0, 0, 9.81]) for k in range(n)]


def test_step_jacobians_match_finite_differences(rng):
    for _ in range(20):
        x = random_state(rng)
        g, a, dt = rng.normal(size=3), rng.normal(size=3) * 3, 0.01
        F, Fw = step_jacobians(x, g, a, dt)
        x1 = imu_step(x, g, a, dt)
        Fn = numeric_jacobian(lambda d: boxminus(imu_step(boxplus(x, d), g, a, dt), x1), STATE_DIM)
        Fwn = numeric_jacobian(lambda w: boxminus(imu_step(x, g, a, dt, w), x1), 12)
        assert rel_err(F, Fn) < 1e-5
        assert rel_err(Fw, Fwn) < 1e-5


def test_forward_then_backward_recovers_start(rng):
    x = random_state(rng)
    imu = _samples(rng)
    swc, plog = propagate_forward(StateWithCov(x, np.eye(STATE_DIM) * 1e-4, 0.0), imu[1:], NoiseParams(), last=imu[0])
    T = propagate_backward(plog, 0.0)
    # body at t=0 seen from the body at the end
    R0 = swc.state.rot.T @ x.rot
    p0 = swc.state.rot.T @ (x.pos - swc.state.pos)
    assert np.allclose(T.rot, R0, atol=1e-10) and np.allclose(T.trans, p0, atol=1e-9)
    R, p, v = states_at(plog, [0.05])
    assert np.all(np.isfinite(R)) and R.shape == (1, 3, 3)


def test_covariance_stays_symmetric_psd(rng):
    x = random_state(rng)
    swc, _ = propagate_forward(StateWithCov(x, np.eye(STATE_DIM) * 1e-3, 0.0), _samples(rng, 200)[1:],
                               NoiseParams(), last=_samples(rng, 1)[0])
    P = swc.cov
    assert np.array_equal(P, P.T)
    assert np.linalg.eigvalsh(P).min() > -1e-12


def test_non_increasing_time_rejected(rng):
    imu = _samples(rng, 5)
    imu[3] = ImuSample(imu[2].t, imu[3].gyro, imu[3].accel)
    with pytest.raises(PropagationError):
        propagate_forward(StateWithCov(NavState(), np.eye(STATE_DIM), 0.0), imu, NoiseParams())


def test_stationary_level_imu_keeps_state():
    x = NavState()
    imu = [ImuSample(k * 0.01, np.zeros(3), np.array([0, 0, 9.81])) for k in range(101)]
    swc, _ = propagate_forward(StateWithCov(x, np.eye(STATE_DIM), 0.0), imu[1:], NoiseParams(), last=imu[0])
    assert np.abs(swc.state.pos).max() < 1e-12 and np.abs(swc.state.vel).max() < 1e-12
