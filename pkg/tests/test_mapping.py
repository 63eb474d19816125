import numpy as np
import pytest
from hypothesis import given, strategies as st

from dopplerio.mapping import EmptyIndexError, MapIndex, fit_plane, voxel_downsample_indices


def _brute(pts, q, k):
    d = np.sum((pts - q) ** 2, axis=1)
    o = np.lexsort((np.arange(len(pts)), d))[:k]
    return d[o], o


@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_knn_matches_brute_force(seed, k):
    r = np.random.default_rng(seed)
    index = MapIndex(voxel=1e-3)
    chunks = [r.uniform(-10, 10, (int(r.integers(1, 200)), 3)) for _ in range(int(r.integers(1, 6)))]
    for c in chunks:
        index.insert(c)
    pts = index.points()
    ids = index.ids()
    q = r.uniform(-12, 12, (20, 3))
    D, I = index.knn_batch(q, k)
    for j in range(len(q)):
        d, o = _brute(pts, q[j], k)
        assert np.allclose(D[j], d, rtol=0, atol=1e-12)
        assert np.array_equal(I[j], ids[o])


def test_knn_distance_bound(rng):
    index = MapIndex(0.01)
    index.insert(rng.uniform(-5, 5, (500, 3)))
    q = rng.uniform(-6, 6, (50, 3))
    D, I = index.knn_batch(q, 5, max_dist=1.0)
    Df, If = index.knn_batch(q, 5)
    inside = Df <= 1.0
    assert np.array_equal(D[inside], Df[inside]) and np.array_equal(I[inside], If[inside])
    assert np.all(np.isinf(D[~inside])) and np.all(I[~inside] == -1)


def test_voxel_policy_keeps_first_point():
    index = MapIndex(1.0)
    assert index.insert(np.array([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9], [1.5, 0, 0]])) == 2
    assert index.insert(np.array([[0.5, 0.5, 0.5]])) == 0
    assert np.allclose(index.points()[0], [0.1, 0.1, 0.1])
    assert list(voxel_downsample_indices(np.array([[0.1, 0, 0], [5, 5, 5], [0.2, 0, 0]]), 1.0)) == [0, 1]


def test_prune_and_errors(rng):
    index = MapIndex(0.1)
    with pytest.raises(EmptyIndexError):
        index.knn([0, 0, 0], 1)
    with pytest.raises(ValueError):
        index.insert(np.array([[np.nan, 0, 0]]))
    index.insert(rng.uniform(-10, 10, (1000, 3)))
    n = len(index)
    removed = index.prune([0, 0, 0], 5.0)
    assert removed > 0 and len(index) == n - removed
    assert np.all(np.linalg.norm(index.points(), axis=1) <= 5.0)
    # the index stays exact after pruning
    q = rng.uniform(-5, 5, 3)
    pts, dist = index.knn(q, 3)
    d, _ = _brute(index.points(), q, 3)
    assert np.allclose(dist**2, d)


def test_block_count_logarithmic(rng):
    index = MapIndex(1e-3)
    for _ in range(256):
        index.insert(rng.uniform(-50, 50, (10, 3)))
    assert len(index.block_sizes) <= 2 * int(np.log2(len(index))) + 2


def test_plane_fit(rng):
    n = np.array([1.0, 2.0, 2.0]) / 3
    a, b = np.cross(n, [1, 0, 0]), None
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    pts = 3 * n + rng.normal(size=(5, 1)) * a + rng.normal(size=(5, 1)) * b
    p = fit_plane(pts, 0.1, viewpoint=[0, 0, 0])
    assert p.valid and np.allclose(p.normal, -n, atol=1e-9) and p.rms < 1e-12
    assert not fit_plane(pts + rng.normal(0, 0.5, pts.shape), 0.1).valid
    assert not fit_plane(np.outer(np.arange(5.0), [1, 1, 0]), 0.1).valid
