import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_state
from dopplerio.manifold import (
    STATE_DIM, NavState, RigidTransform, boxminus, boxplus, normalize_rotation, quat_to_rot, right_jacobian,
    right_jacobian_inv, rot_to_quat, so3_exp, so3_log,
)

vec3 = arrays(np.float64, 3, elements=st.floats(-3, 3, allow_nan=False))


def test_exp_examples():
    assert np.allclose(so3_exp([0, 0, 0]), np.eye(3), atol=0)
    R = so3_exp([0, 0, np.pi / 2])
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_exp_log_round_trip_1000_seeds():
    t = time.perf_counter()
    for seed in range(1000):
        r = np.random.default_rng(seed)
        axis = r.normal(size=3)
        axis /= np.linalg.norm(axis)
        phi = axis * r.uniform(0, np.pi - 1e-3)
        assert np.linalg.norm(so3_log(so3_exp(phi)) - phi) < 1e-9
    assert time.perf_counter() - t < 1.0


def test_small_angle_series_matches_closed_form():
    phi = np.array([3e-8, -1e-8, 2e-8])
    R = so3_exp(phi)
    assert np.allclose(so3_log(R), phi, atol=1e-15)
    # just above the threshold the closed form takes over seamlessly
    assert np.allclose(so3_exp(phi * 10), so3_exp(phi * 9.999999), atol=1e-13)


def test_boxplus_examples():
    x = NavState()
    assert np.array_equal(boxplus(x, np.zeros(STATE_DIM)).pos, x.pos)
    d = np.zeros(STATE_DIM)
    d[3:6] = [1, 2, 3]
    assert np.allclose(boxplus(x, d).pos, [1, 2, 3])
    assert np.allclose(boxminus(x, x), 0)
    with pytest.raises(ValueError):
        boxplus(x, np.full(STATE_DIM, np.nan))


def test_boxplus_boxminus_round_trip_1000_pairs():
    for seed in range(1000):
        r = np.random.default_rng(seed)
        x = random_state(r)
        d = r.normal(size=STATE_DIM)
        d *= r.uniform(0, 0.1) / np.linalg.norm(d)
        assert np.abs(boxminus(boxplus(x, d), x) - d).max() < 1e-8
        y = random_state(r)
        back = boxplus(y, boxminus(x, y))
        assert np.abs(boxminus(back, x)).max() < 1e-8


def test_chained_compositions_stay_orthonormal():
    r = np.random.default_rng(7)
    steps = so3_exp(r.normal(size=3) * 0.1), so3_exp(r.normal(size=3) * 0.1)
    R = np.eye(3)
    for k in range(100_000):
        R = normalize_rotation(R @ steps[k & 1])
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9


@given(vec3)
def test_quaternion_round_trip(phi):
    R = so3_exp(phi)
    q = rot_to_quat(R)
    assert abs(np.linalg.norm(q) - 1) < 1e-9
    assert np.allclose(quat_to_rot(q), R, atol=1e-12)


@given(vec3, vec3)
def test_right_jacobian_first_order(phi, d):
    d = d * 1e-7
    lhs = so3_exp(phi + d)
    rhs = so3_exp(phi) @ so3_exp(right_jacobian(phi) @ d)
    assert np.abs(lhs - rhs).max() < 1e-12
    if np.linalg.norm(phi) < np.pi - 1e-2:
        assert np.allclose(right_jacobian(phi) @ right_jacobian_inv(phi), np.eye(3), atol=1e-9)


@given(vec3, vec3, vec3, vec3, vec3, vec3)
def test_rigid_transform_group_laws(a, b, c, ta, tb, tc):
    A, B, C = RigidTransform(so3_exp(a), ta), RigidTransform(so3_exp(b), tb), RigidTransform(so3_exp(c), tc)
    L, R = (A @ B) @ C, A @ (B @ C)
    assert np.allclose(L.rot, R.rot, atol=1e-9) and np.allclose(L.trans, R.trans, atol=1e-9)
    I = A.inverse() @ A
    assert np.allclose(I.rot, np.eye(3), atol=1e-9) and np.allclose(I.trans, 0, atol=1e-9)
