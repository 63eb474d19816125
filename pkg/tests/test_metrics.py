import numpy as np
import pytest
from hypothesis import given, strategies as st

from dopplerio.manifold import so3_exp
from dopplerio.metrics import MetricsError, Trajectory, evaluate, evaluate_files, read_tum, umeyama, write_tum


def _traj(rng, n=50):
    t = np.arange(n) * 0.1
    pos = np.cumsum(rng.normal(size=(n, 3)), axis=0)
    rot = np.array([so3_exp(rng.normal(size=3)) for _ in range(n)])
    return Trajectory(t, pos, rot)


def test_constant_offset(rng):
    gt = _traj(rng)
    est = Trajectory(gt.times, gt.pos + [1.0, 0, 0], gt.rot)
    rep = evaluate(est, gt, "none")
    assert abs(rep.ape_rmse - 1.0) < 1e-12 and rep.rpe_trans < 1e-12 and rep.rpe_rot_deg < 1e-6
    assert evaluate(est, gt, "rigid").ape_rmse < 1e-9


@given(st.integers(0, 2**31 - 1))
def test_rigid_alignment_oracle(seed):
    r = np.random.default_rng(seed)
    gt = _traj(r)
    R, t = so3_exp(r.normal(size=3) * 2), r.normal(size=3) * 10
    est = Trajectory(gt.times, gt.pos @ R.T + t, np.einsum("ij,njk->nik", R, gt.rot))
    rep = evaluate(est, gt, "rigid")
    assert rep.ape_rmse < 1e-9
    # relative errors are invariant to the global transform
    assert rep.rpe_trans < 1e-9 and rep.rpe_rot_deg < 1e-5


def test_umeyama_reflection_guard(rng):
    a = rng.normal(size=(30, 3))
    R, t = umeyama(a, a * [1, 1, -1])
    assert np.linalg.det(R) > 0


def test_file_round_trip_and_errors(tmp_path, rng):
    gt = _traj(rng)
    write_tum(tmp_path / "a.tum", gt.times, gt.pos, gt.rot)
    back = read_tum(tmp_path / "a.tum")
    assert np.array_equal(back.pos, gt.pos) and np.allclose(back.rot, gt.rot, atol=1e-12)
    assert evaluate_files(tmp_path / "a.tum", tmp_path / "a.tum").ape_rmse == 0.0
    (tmp_path / "b.tum").write_text("0 1 2 3\n")
    with pytest.raises(MetricsError):
        read_tum(tmp_path / "b.tum")
    far = Trajectory(gt.times + 100, gt.pos, gt.rot)
    with pytest.raises(MetricsError):
        evaluate(far, gt)
    with pytest.raises(MetricsError):
        evaluate(gt, gt, "similarity")


def test_planar_ignores_height(rng):
    gt = _traj(rng)
    est = Trajectory(gt.times, gt.pos + [0, 0, 3.0], gt.rot)
    assert evaluate(est, gt, planar=True).ape_rmse == 0.0
