"""Ray-triangle intersection: vectorized Moller-Trumbore under a median-split
BVH, with the all-triangles path kept as a test oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_DET_EPS = 1e-12
_BARY_EPS = 1e-12


def _moller_trumbore(
    origins: np.ndarray,
    dirs: np.ndarray,
    v0: np.ndarray,
    e1: np.ndarray,
    e2: np.ndarray,
) -> np.ndarray:
    """Hit distances for every ray/triangle pair; +inf where there is none.
    Both triangle sides count (LiDAR sees back faces)."""
    h = np.cross(dirs[:, None, :], e2[None, :, :])
    det = np.einsum("tj,rtj->rt", e1, h)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = origins[:, None, :] - v0[None, :, :]
        u = inv * np.einsum("rtj,rtj->rt", s, h)
        q = np.cross(s, e1[None, :, :])
        v = inv * np.einsum("rj,rtj->rt", dirs, q)
        t = inv * np.einsum("tj,rtj->rt", e2, q)
        ok = (
            (np.abs(det) > _DET_EPS)
            & (u >= -_BARY_EPS)
            & (v >= -_BARY_EPS)
            & (u + v <= 1.0 + _BARY_EPS)
            & (t > 0.0)
        )
    return np.where(ok, t, np.inf)


def _reduce_best(
    t: np.ndarray, tri_ids: np.ndarray, best_t: np.ndarray, best_id: np.ndarray
) -> None:
    """Keep the nearest hit per ray; ties broken by lowest triangle id so the
    BVH path agrees with the brute-force oracle bit for bit."""
    order = np.argsort(tri_ids)
    t = t[:, order]
    tri_ids = tri_ids[order]
    j = np.argmin(t, axis=1)  # first minimum = lowest id on ties
    cand_t = t[np.arange(t.shape[0]), j]
    cand_id = tri_ids[j]
    better = (cand_t < best_t) | ((cand_t == best_t) & (cand_id < best_id))
    np.copyto(best_t, cand_t, where=better)
    np.copyto(best_id, cand_id, where=better)


def intersect_brute_force(
    origins: np.ndarray, dirs: np.ndarray, triangles: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(ranges, triangle ids) of nearest hits; inf/-1 where the ray escapes."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    tris = np.asarray(triangles, dtype=np.float64)
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    if tris.shape[0] == 0:
        return best_t, best_id
    t = _moller_trumbore(origins, dirs, tris[:, 0], tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    _reduce_best(t, np.arange(tris.shape[0]), best_t, best_id)
    return best_t, best_id


@dataclass
class _Node:
    lo: np.ndarray
    hi: np.ndarray
    left: int
    right: int
    start: int
    count: int


class BVH:
    """Median-split bounding-volume hierarchy over triangles."""

    def __init__(self, triangles: np.ndarray, leaf_size: int = 8) -> None:
        tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        self.triangles = tris
        self._v0 = tris[:, 0]
        self._e1 = tris[:, 1] - tris[:, 0]
        self._e2 = tris[:, 2] - tris[:, 0]
        self._tri_lo = tris.min(axis=1)
        self._tri_hi = tris.max(axis=1)
        self.order = np.arange(tris.shape[0])
        self.nodes: list[_Node] = []
        self._leaf_cursor = 0
        if tris.shape[0] > 0:
            self._build(np.arange(tris.shape[0]), leaf_size)

    def _build(self, idx: np.ndarray, leaf_size: int) -> int:
        lo = self._tri_lo[idx].min(axis=0)
        hi = self._tri_hi[idx].max(axis=0)
        node_id = len(self.nodes)
        self.nodes.append(_Node(lo, hi, -1, -1, 0, 0))
        if idx.size <= leaf_size:
            start = self._leaf_cursor
            self.order[start : start + idx.size] = idx
            self.nodes[node_id].start = start
            self.nodes[node_id].count = idx.size
            self._leaf_cursor = start + idx.size
            return node_id
        centers = (self._tri_lo[idx] + self._tri_hi[idx]) / 2.0
        axis = int(np.argmax(centers.max(axis=0) - centers.min(axis=0)))
        split = np.argsort(centers[:, axis], kind="stable")
        half = idx.size // 2
        left = self._build(idx[split[:half]], leaf_size)
        right = self._build(idx[split[half:]], leaf_size)
        self.nodes[node_id].left = left
        self.nodes[node_id].right = right
        return node_id

    def intersect(
        self,
        origins: np.ndarray,
        dirs: np.ndarray,
        t_min: float = 0.0,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Nearest hit with t >= t_min per ray: (ranges, triangle ids)."""
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        n = origins.shape[0]
        best_t = np.full(n, np.inf)
        best_id = np.full(n, -1, dtype=np.int64)
        if not self.nodes:
            return best_t, best_id
        with np.errstate(divide="ignore"):
            inv_dir = 1.0 / dirs
        stack: list[tuple[int, np.ndarray]] = [(0, np.arange(n))]
        while stack:
            node_id, rays = stack.pop()
            node = self.nodes[node_id]
            o = origins[rays]
            iv = inv_dir[rays]
            with np.errstate(invalid="ignore"):
                t0 = (node.lo[None, :] - o) * iv
                t1 = (node.hi[None, :] - o) * iv
            near = np.fmin(t0, t1)  # fmin/fmax drop the NaNs from 0 * inf
            far = np.fmax(t0, t1)
            tn = np.fmax(np.fmax(near[:, 0], near[:, 1]), near[:, 2])
            tf = np.fmin(np.fmin(far[:, 0], far[:, 1]), far[:, 2])
            alive = (tn <= tf + 1e-12) & (tf >= t_min) & (tn <= best_t[rays])
            rays = rays[alive]
            if rays.size == 0:
                continue
            if node.count > 0:
                ids = self.order[node.start : node.start + node.count]
                t = _moller_trumbore(
                    origins[rays], dirs[rays], self._v0[ids], self._e1[ids], self._e2[ids]
                )
                t = np.where(t >= t_min, t, np.inf)
                sub_t = best_t[rays]
                sub_id = best_id[rays]
                _reduce_best(t, ids, sub_t, sub_id)
                best_t[rays] = sub_t
                best_id[rays] = sub_id
            else:
                stack.append((node.right, rays))
                stack.append((node.left, rays))
        return best_t, best_id
