"""Offline mesh extraction and the evaluation metrics.

Meshing re-renders the trained field with a virtual copy of the sensor at
every keyframe pose, buckets the render weights into a voxel grid (keeping
the per-voxel maximum), normalizes, and runs marching cubes.  Trajectory
error is the classic timestamp-associated, rigidly aligned translation
RMSE; map quality compares voxel-downsampled point clouds both ways.
Everything here is batch, deterministic, and gradient-free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .autodiff import ParamStore
from .field import FieldConfig, RayBatch, eval_depth, render_eval, sample_distances
from .geometry import PointCloud, Pose, voxel_downsample
from .sim import Dataset, LidarModel

CloudLike = Union[PointCloud, np.ndarray]


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3) meters
    triangles: np.ndarray  # (F, 3) vertex indices

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    def __len__(self) -> int:
        return self.triangles.shape[0]


@dataclass(frozen=True)
class MapMetrics:
    accuracy: float  # meters, est -> gt
    completion: float  # meters, gt -> est
    precision: float
    recall: float

    def as_dict(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "completion": self.completion,
            "precision": self.precision,
            "recall": self.recall,
        }


def _face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - a
    e2 = vertices[faces[:, 2]] - a
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def extract_mesh(
    params: ParamStore,
    cfg: FieldConfig,
    keyframe_poses: Sequence[Pose],
    model: LidarModel,
    voxel: float = 0.1,
    iso: float = 0.5,
    n_samples: int = 256,
    weight_formula: str = "paper",
    chunk: int = 256,
    min_weight: float = 0.05,
) -> Mesh:
    """Mesh the iso-surface of the max-bucketed render weights.

    A virtual copy of the sensor renders the field from every keyframe pose;
    each ray sample drops its weight into the voxel it falls in, voxels keep
    their maximum, and the grid is normalized by its global maximum before
    marching cubes at `iso`.  Unobserved space stays empty, so the mesh only
    appears where rays actually saw surface.  Duplicate poses are free:
    max-bucketing is idempotent.

    min_weight is an absolute floor on the peak: normalization alone would
    blow up the near-uniform weights of an untrained field into full-grid
    noise, so a grid whose best voxel never reached min_weight is treated as
    unobserved and yields an empty mesh.
    """
    if len(keyframe_poses) == 0:
        raise ValueError("need at least one keyframe pose")
    if not 0.0 < iso < 1.0:
        raise ValueError("iso must be in (0, 1)")
    if voxel <= 0.0:
        raise ValueError("voxel must be positive")

    lo = np.asarray(cfg.bounds_lo, dtype=np.float64)
    hi = np.asarray(cfg.bounds_hi, dtype=np.float64)
    dims = np.maximum(np.ceil((hi - lo) / voxel).astype(np.int64), 1)
    grid = np.zeros(tuple(dims))

    dirs_body, _, _ = model.ray_grid()
    t_far = cfg.t_far()
    for pose in keyframe_poses:
        dirs = dirs_body @ pose.rotation.T
        origins = np.broadcast_to(pose.translation, dirs.shape)
        for i in range(0, len(dirs), chunk):
            j = min(i + chunk, len(dirs))
            m = j - i
            none_z = np.full(m, -1.0)
            t = sample_distances(none_z, model.min_range, t_far, n_samples, "uniform", rng=None)
            batch = RayBatch(origins[i:j], dirs[i:j], none_z, np.zeros(m, bool), t)
            w = render_eval(batch, params, cfg, weight_formula)["weights"]
            pos = origins[i:j, None, :] + dirs[i:j, None, :] * t[..., None]
            idx = np.floor((pos.reshape(-1, 3) - lo) / voxel).astype(np.int64)
            ok = np.all((idx >= 0) & (idx < dims), axis=1)
            flat = np.ravel_multi_index(tuple(idx[ok].T), tuple(dims))
            np.maximum.at(grid.reshape(-1), flat, w.reshape(-1)[ok])

    peak = grid.max()
    if peak < min_weight or peak <= 0.0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    grid /= peak
    if not (grid.min() < iso < grid.max()) or any(d < 2 for d in dims):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))

    verts, faces, _, _ = measure.marching_cubes(grid, level=iso, spacing=(voxel,) * 3)
    verts = verts + lo + 0.5 * voxel  # grid values live at voxel centers
    keep = _face_areas(verts, faces) > 1e-12
    return Mesh(verts, faces[keep])


def mesh_to_pointcloud(mesh: Mesh, voxel: float = 0.1, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted samples, one point per voxel^2 of surface."""
    if len(mesh) == 0:
        return np.zeros((0, 3))
    areas = _face_areas(mesh.vertices, mesh.triangles)
    total = areas.sum()
    if total <= 0.0:
        return np.zeros((0, 3))
    n = max(int(np.ceil(total / voxel**2)), 1)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.triangles[pick]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def _associate(
    est: Sequence[tuple[float, Pose]],
    gt: Sequence[tuple[float, Pose]],
    max_dt: float,
) -> tuple[np.ndarray, np.ndarray]:
    gt_times = np.array([t for t, _ in gt])
    pairs_e, pairs_g = [], []
    for t, pose in est:
        k = int(np.searchsorted(gt_times, t))
        best, best_dt = -1, max_dt
        for c in (k - 1, k):
            if 0 <= c < len(gt_times) and abs(gt_times[c] - t) <= best_dt:
                best, best_dt = c, abs(gt_times[c] - t)
        if best >= 0:
            pairs_e.append(pose.translation)
            pairs_g.append(gt[best][1].translation)
    return np.array(pairs_e).reshape(-1, 3), np.array(pairs_g).reshape(-1, 3)


def _align_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation minimizing ||R src + t - dst||, no scale."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    return rot, mu_d - rot @ mu_s


def ape(
    est: Sequence[tuple[float, Pose]],
    gt: Sequence[tuple[float, Pose]],
    max_dt: float = 0.1,
) -> float:
    """Absolute pose error: aligned translation RMSE over associated stamps.

    Pairs each estimated pose with the nearest groundtruth stamp within
    max_dt, removes the best rigid transform between the two point sets, and
    reports the RMSE of what is left.  max_dt defaults to half a scan period
    at the default rate.
    """
    src, dst = _associate(est, gt, max_dt)
    if len(src) < 3:
        raise ValueError(f"only {len(src)} poses associated; need at least 3")
    rot, t = _align_rigid(src, dst)
    res = src @ rot.T + t - dst
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


def _as_points(cloud: CloudLike) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    return pts.reshape(-1, 3).astype(np.float64)


def map_metrics(
    est_map: CloudLike,
    gt_map: CloudLike,
    threshold: float = 0.1,
    voxel: float = 0.05,
) -> MapMetrics:
    """Two-sided nearest-neighbor map comparison on downsampled clouds.

    accuracy/precision look from the estimate toward groundtruth,
    completion/recall the other way around; swapping the inputs swaps the
    pairs exactly.
    """
    est = voxel_downsample(_as_points(est_map), voxel)
    gt = voxel_downsample(_as_points(gt_map), voxel)
    if len(est) == 0 or len(gt) == 0:
        raise ValueError("both maps must be nonempty")
    d_eg, _ = cKDTree(gt).query(est)
    d_ge, _ = cKDTree(est).query(gt)
    return MapMetrics(
        accuracy=float(d_eg.mean()),
        completion=float(d_ge.mean()),
        precision=float((d_eg <= threshold).mean()),
        recall=float((d_ge <= threshold).mean()),
    )


def l1_depth(
    params: ParamStore,
    cfg: FieldConfig,
    dataset: Dataset,
    poses: Sequence[tuple[float, Pose]],
    n_scans: int = 25,
    seed: int = 0,
    weight_formula: str = "paper",
    n_samples: int = 128,
) -> float:
    """Mean per-ray |rendered depth - measured range| over sampled scans.

    Draws n_scans scans without replacement (all of them if the sequence is
    shorter), looks up each scan's pose by nearest timestamp, and renders
    every valid-return ray from that single pose.
    """
    if n_scans < 1:
        raise ValueError("n_scans must be at least 1")
    if len(poses) == 0:
        raise ValueError("poses is empty")
    rng = np.random.default_rng(seed)
    n = len(dataset.scans)
    idx = np.sort(rng.choice(n, size=min(n_scans, n), replace=False))
    max_dt = 0.5 / dataset.lidar.scan_rate
    pose_times = np.array([t for t, _ in poses])

    errs = []
    for i in idx:
        scan = dataset.scans[i]
        k = int(np.argmin(np.abs(pose_times - scan.stamp)))
        if abs(pose_times[k] - scan.stamp) > max_dt:
            raise ValueError(f"no pose within {max_dt:.3f}s of scan at t={scan.stamp:.3f}")
        pose = poses[k][1]
        valid = scan.valid
        dirs = scan.directions[valid] @ pose.rotation.T
        origins = np.broadcast_to(pose.translation, dirs.shape)
        depth, _ = eval_depth(
            origins, dirs, params, cfg,
            n_samples=n_samples, t_near=dataset.lidar.min_range,
            weight_formula=weight_formula,
        )
        errs.append(np.abs(depth - scan.ranges[valid]))
    return float(np.concatenate(errs).mean())


def write_metrics(path: str | Path, metrics: dict) -> None:
    """Flat key/value metrics as JSON, one stable order."""
    clean = {k: metrics[k] for k in sorted(metrics)}
    Path(path).write_text(json.dumps(clean, indent=2) + "\n")


def write_depth_pgm(path: str | Path, depth_m: np.ndarray, valid: np.ndarray) -> None:
    """16-bit PGM, big-endian, millimeters; 0 marks rays with no depth."""
    depth_m = np.asarray(depth_m, dtype=np.float64)
    if depth_m.ndim != 2:
        raise ValueError("depth image must be 2-D")
    mm = np.clip(np.round(depth_m * 1000.0), 1, 65535).astype(np.uint16)
    mm = np.where(np.asarray(valid, bool), mm, 0).astype(">u2")
    header = f"P5\n{depth_m.shape[1]} {depth_m.shape[0]}\n65535\n".encode()
    Path(path).write_bytes(header + mm.tobytes())


def read_depth_pgm(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of write_depth_pgm: (depth meters, valid mask)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"65535":
        raise ValueError("not a 16-bit PGM depth image")
    w, h = (int(x) for x in parts[1].split())
    mm = np.frombuffer(parts[3][: 2 * w * h], dtype=">u2").reshape(h, w)
    return mm.astype(np.float64) / 1000.0, mm > 0
