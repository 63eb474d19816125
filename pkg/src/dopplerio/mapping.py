"""Incremental exact nearest-neighbour map, local plane fitting and map export.

The index is a logarithmic forest of static k-d trees: each insertion adds a
block, and adjacent blocks are merged while the older one is less than twice
the size of the newer one, so there are O(log n) blocks.  Queries merge the
per-block candidates and order them by (squared distance, insertion id), so
results are exact and ties go to the earlier-inserted point.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class EmptyIndexError(LookupError):
    pass


@dataclass
class _Block:
    tree: cKDTree
    ids: np.ndarray  # storage indices, ascending

    def __len__(self) -> int:
        return len(self.ids)


class MapIndex:
    def __init__(self, voxel: float = 0.5):
        if voxel <= 0:
            raise ValueError("voxel must be > 0")
        self.voxel = float(voxel)
        self._pts = np.empty((1024, 3))
        self._n = 0  # storage slots used (including removed points)
        self._alive = np.zeros(1024, dtype=bool)
        self._codes = np.zeros(0, dtype=np.int64)  # sorted codes of occupied voxels
        self._blocks: list[_Block] = []

    # ------------------------------------------------------------------ state

    def __len__(self) -> int:
        return sum(len(b) for b in self._blocks)

    @property
    def block_sizes(self) -> list[int]:
        return [len(b) for b in self._blocks]

    def points(self) -> np.ndarray:
        """Alive points in insertion order."""
        idx = np.flatnonzero(self._alive[: self._n])
        return self._pts[idx].copy()

    def ids(self) -> np.ndarray:
        return np.flatnonzero(self._alive[: self._n])

    # ----------------------------------------------------------------- writes

    def _voxel_keys(self, pts: np.ndarray) -> np.ndarray:
        return np.floor(pts / self.voxel).astype(np.int64)

    def _voxel_codes(self, pts: np.ndarray) -> np.ndarray:
        return voxel_codes(pts, self.voxel)

    def _grow(self, extra: int) -> None:
        need = self._n + extra
        if need <= len(self._pts):
            return
        cap = max(need, 2 * len(self._pts))
        pts = np.empty((cap, 3))
        pts[: self._n] = self._pts[: self._n]
        alive = np.zeros(cap, dtype=bool)
        alive[: self._n] = self._alive[: self._n]
        self._pts, self._alive = pts, alive

    def insert(self, pts: np.ndarray) -> int:
        """Voxel-downsample and insert; returns the number of points added.

        Policy: the first point to land in a voxel is kept, whether it came
        earlier in this batch or in a previous insertion.
        """
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            return 0
        if not np.all(np.isfinite(pts)):
            raise ValueError("map points must be finite")
        codes = self._voxel_codes(pts)
        _, first = np.unique(codes, return_index=True)
        first.sort()
        c = codes[first]
        pos = np.searchsorted(self._codes, c)
        known = (pos < len(self._codes)) & (self._codes[np.minimum(pos, len(self._codes) - 1)] == c) \
            if len(self._codes) else np.zeros(len(c), dtype=bool)
        keep = first[~known]
        if len(keep) == 0:
            return 0
        self._codes = np.sort(np.concatenate([self._codes, codes[keep]]))
        new = pts[keep]
        self._grow(len(new))
        sl = slice(self._n, self._n + len(new))
        self._pts[sl] = new
        self._alive[sl] = True
        self._blocks.append(_Block(cKDTree(new), np.arange(self._n, self._n + len(new))))
        self._n += len(new)
        self._merge()
        return len(new)

    def _merge(self) -> None:
        while len(self._blocks) >= 2 and len(self._blocks[-2]) < 2 * len(self._blocks[-1]):
            b = self._blocks.pop()
            a = self._blocks.pop()
            ids = np.concatenate([a.ids, b.ids])
            self._blocks.append(_Block(cKDTree(self._pts[ids]), ids))

    def prune(self, center, radius: float) -> int:
        """Remove points farther than ``radius`` from ``center``; returns count removed."""
        if not radius > 0:
            raise ValueError("radius must be > 0")
        center = np.asarray(center, dtype=float)
        ids = self.ids()
        if len(ids) == 0:
            return 0
        far = np.sum((self._pts[ids] - center) ** 2, axis=1) > radius * radius
        if not far.any():
            return 0
        gone = ids[far]
        self._alive[gone] = False
        self._codes = np.setdiff1d(self._codes, self._voxel_codes(self._pts[gone]))
        self._rebuild()
        return int(far.sum())

    def clear(self) -> None:
        self._alive[:] = False
        self._codes = np.zeros(0, dtype=np.int64)
        self._blocks.clear()

    def _rebuild(self) -> None:
        ids = self.ids()
        self._blocks = [_Block(cKDTree(self._pts[ids]), ids)] if len(ids) else []

    # ---------------------------------------------------------------- queries

    def knn_batch(self, queries: np.ndarray, k: int, max_dist: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Squared distances and storage ids (N, m), m = min(k, size), sorted.

        With ``max_dist`` neighbours farther than that are not searched for; missing
        slots come back with distance inf and id -1.
        """
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        size = len(self)
        if size == 0:
            raise EmptyIndexError("knn on an empty map")
        m = min(k, size)
        nq = len(queries)
        bound = np.inf if max_dist is None else float(max_dist) * (1 + 1e-9)
        cand_ids, cand_d, incomplete = [], [], []
        for b in self._blocks:
            kb = min(m + 1, len(b))
            dist, loc = b.tree.query(queries, k=kb, distance_upper_bound=bound)
            loc = np.asarray(loc).reshape(nq, kb)
            miss = loc >= len(b)
            ids = b.ids[np.where(miss, 0, loc)]
            d = np.sum((self._pts[ids] - queries[:, None, :]) ** 2, axis=2)
            d[miss] = np.inf
            ids[miss] = -1
            cand_ids.append(ids)
            cand_d.append(d)
            incomplete.append((kb < len(b), d.max(axis=1)))
        I = np.concatenate(cand_ids, axis=1)
        D = np.concatenate(cand_d, axis=1)
        order = np.lexsort((I, D), axis=1)[:, :m]
        I = np.take_along_axis(I, order, axis=1)
        D = np.take_along_axis(D, order, axis=1)
        kth = D[:, -1]
        redo = np.zeros(nq, dtype=bool)
        for partial, dmax in incomplete:
            if partial:
                redo |= dmax <= kth
        redo &= np.isfinite(kth)
        for r in np.flatnonzero(redo):
            D[r], I[r] = self._knn_exhaustive(queries[r], m, kth[r])
        return D, I

    def _knn_exhaustive(self, q, m, kth):
        rad = np.sqrt(kth) * (1 + 1e-9) + 1e-12
        ids = np.concatenate([b.ids[np.asarray(b.tree.query_ball_point(q, rad), dtype=int)] for b in self._blocks])
        d = np.sum((self._pts[ids] - q) ** 2, axis=1)
        o = np.lexsort((ids, d))[:m]
        return d[o], ids[o]

    def knn(self, query, k: int) -> tuple[np.ndarray, np.ndarray]:
        """The min(k, size) nearest points and their distances, nearest first."""
        D, I = self.knn_batch(np.asarray(query, dtype=float)[None], k)
        return self._pts[I[0]].copy(), np.sqrt(D[0])

    def gather(self, ids: np.ndarray) -> np.ndarray:
        return self._pts[ids]


@dataclass
class PlanePatch:
    normal: np.ndarray
    centroid: np.ndarray
    rms: float
    valid: bool


def fit_planes(neigh: np.ndarray, threshold: float, viewpoint=None):
    """Batched least-squares planes through (N, k, 3) neighbourhoods.

    Returns normals (N,3), centroids (N,3), rms (N,), valid (N,).  Normals
    point towards ``viewpoint`` (default origin).  A patch is valid iff every
    point lies within ``threshold`` of the plane and the points are not
    collinear.
    """
    neigh = np.asarray(neigh, dtype=float)
    c = neigh.mean(axis=1)
    d = neigh - c[:, None, :]
    C = np.einsum("nki,nkj->nij", d, d) / neigh.shape[1]
    w, V = np.linalg.eigh(C)
    normal = V[:, :, 0]
    dist = np.einsum("nkj,nj->nk", d, normal)
    rms = np.sqrt(np.mean(dist * dist, axis=1))
    scale = np.maximum(w[:, 2], 1e-300)
    degenerate = w[:, 1] <= 1e-10 * scale + 1e-20
    valid = (np.abs(dist).max(axis=1) <= threshold) & ~degenerate
    vp = np.zeros(3) if viewpoint is None else np.asarray(viewpoint, dtype=float)
    flip = np.einsum("ni,ni->n", normal, vp - c) < 0
    normal[flip] *= -1
    return normal, c, rms, valid


def fit_plane(points, validity_threshold: float = 0.1, viewpoint=None) -> PlanePatch:
    n, c, rms, valid = fit_planes(np.asarray(points, dtype=float)[None], validity_threshold, viewpoint)
    return PlanePatch(n[0], c[0], float(rms[0]), bool(valid[0]))


def voxel_codes(pts: np.ndarray, voxel: float) -> np.ndarray:
    """One int64 per point identifying its voxel (21 bits per axis)."""
    k = np.floor(np.asarray(pts, dtype=float).reshape(-1, 3) / voxel).astype(np.int64) + (1 << 20)
    if np.any(k < 0) or np.any(k >= 1 << 21):
        raise ValueError("point outside the addressable voxel range")
    return (k[:, 0] << 42) | (k[:, 1] << 21) | k[:, 2]


def voxel_downsample_indices(pts: np.ndarray, voxel: float) -> np.ndarray:
    """Indices of the first point in each occupied voxel, in input order."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=int)
    _, first = np.unique(voxel_codes(pts, voxel), return_index=True)
    return np.sort(first)


def export_csv(path, pts: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("x,y,z\n")
        for x, y, z in pts:
            f.write(f"{x!r},{y!r},{z!r}\n")


def export_pcd(path, pts: np.ndarray) -> None:
    """Binary PCD (v0.7) with float32 x y z fields."""
    pts = np.asarray(pts, dtype=np.float32).reshape(-1, 3)
    header = (
        "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\n"
        f"COUNT 1 1 1\nWIDTH {len(pts)}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {len(pts)}\nDATA binary\n"
    )
    with open(Path(path), "wb") as f:
        f.write(header.encode("ascii"))
        f.write(pts.astype("<f4").tobytes())
