"""Sequence generation and the on-disk dataset layout."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..geometry import PointCloud, Pose, interpolate_pose, load_tum, save_tum, voxel_downsample
from ..ply import read_ply, write_ply
from .lidar import NO_RETURN, LidarModel, LidarScan, cast_scan
from .raycast import BVH
from .scene import Scene, get_scene

_CSV_HEADER = "dir_x,dir_y,dir_z,range_or_-1,timestamp,az_idx,el_idx"


@dataclass
class Dataset:
    scans: list[LidarScan]
    gt_trajectory: list[tuple[float, Pose]]
    gt_map: PointCloud
    lidar: LidarModel
    scene_name: str = ""
    scene_bounds: Optional[tuple[np.ndarray, np.ndarray]] = None
    seed: int = 0

    def gt_pose_at(self, t: float) -> Pose:
        return _pose_at(self.gt_trajectory, t)


def _pose_at(waypoints: Sequence[tuple[float, Pose]], t: float) -> Pose:
    """Piecewise interpolation, clamped to the waypoint time span."""
    times = [w[0] for w in waypoints]
    if t <= times[0]:
        return waypoints[0][1]
    if t >= times[-1]:
        return waypoints[-1][1]
    j = int(np.searchsorted(times, t, side="right"))
    t0, p0 = waypoints[j - 1]
    t1, p1 = waypoints[j]
    u = (t - t0) / (t1 - t0)
    return interpolate_pose(p0, p1, u)


def generate_sequence(
    scene: Scene,
    waypoints: Sequence[tuple[float, Pose]],
    model: LidarModel,
    noise_std: float = 0.0,
    dropout: float = 0.0,
    seed: int = 0,
    map_voxel: float = 0.05,
) -> Dataset:
    """Scans along the interpolated trajectory, with per-azimuth intra-scan
    poses. Range noise and dropout perturb the stored scans only; the
    groundtruth map always comes from the noiseless casts."""
    if model.scan_rate <= 0.0:
        raise ValueError("scan_rate must be positive")
    if len(waypoints) < 2:
        raise ValueError("need at least two waypoints")
    times = [w[0] for w in waypoints]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("waypoints must be strictly time-sorted")

    bvh = BVH(scene.triangles)
    t0, t1 = times[0], times[-1]
    n_scans = max(1, int(round((t1 - t0) * model.scan_rate)))
    rng = np.random.default_rng(seed)

    scans: list[LidarScan] = []
    gt_traj: list[tuple[float, Pose]] = []
    map_points: list[np.ndarray] = []
    denom = max(model.azimuth_count - 1, 1)
    col_offsets = -model.scan_period + model.scan_period * np.arange(model.azimuth_count) / denom

    for k in range(n_scans):
        stamp = t0 + k / model.scan_rate
        ray_poses = [_pose_at(waypoints, stamp + dt) for dt in col_offsets]
        scan = cast_scan(scene, ray_poses[-1], model, stamp, bvh=bvh, ray_poses=ray_poses)
        gt_traj.append((stamp, _pose_at(waypoints, stamp)))

        valid = scan.valid
        if valid.any():
            rots = np.stack([p.rotation for p in ray_poses])
            trans = np.stack([p.translation for p in ray_poses])
            wd = np.einsum("nij,nj->ni", rots[scan.az_idx[valid]], scan.directions[valid])
            map_points.append(trans[scan.az_idx[valid]] + wd * scan.ranges[valid][:, None])

        ranges = scan.ranges
        if noise_std > 0.0:
            noise = rng.normal(0.0, noise_std, size=ranges.shape)
            ranges = np.where(valid, ranges + noise, ranges)
        if dropout > 0.0:
            drop = rng.random(ranges.shape) < dropout
            ranges = np.where(drop & valid, NO_RETURN, ranges)
        if noise_std > 0.0 or dropout > 0.0:
            scan = LidarScan(
                scan.directions, ranges, scan.timestamps, scan.az_idx, scan.el_idx, stamp
            )
        scans.append(scan)

    pts = np.concatenate(map_points, axis=0) if map_points else np.zeros((0, 3))
    gt_map = PointCloud(voxel_downsample(pts, map_voxel))
    return Dataset(scans, gt_traj, gt_map, model, scene.name, scene.bounds(), seed)


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    lo, hi = ds.scene_bounds if ds.scene_bounds is not None else (None, None)
    meta = {
        "scene": ds.scene_name,
        "seed": ds.seed,
        "scan_rate": ds.lidar.scan_rate,
        "lidar": {
            "azimuth_count": ds.lidar.azimuth_count,
            "elevation_angles": list(ds.lidar.elevation_angles),
            "max_range": ds.lidar.max_range,
            "min_range": ds.lidar.min_range,
            "scan_period": ds.lidar.scan_period,
            "scan_rate": ds.lidar.scan_rate,
        },
        "scene_bounds": None if lo is None else [list(lo), list(hi)],
        "n_scans": len(ds.scans),
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for i, scan in enumerate(ds.scans):
        rows = [_CSV_HEADER]
        for j in range(len(scan)):
            d = scan.directions[j]
            rows.append(
                f"{d[0]:.12f},{d[1]:.12f},{d[2]:.12f},"
                f"{scan.ranges[j]:.9f},{scan.timestamps[j]:.9f},"
                f"{scan.az_idx[j]},{scan.el_idx[j]}"
            )
        (out / "scans" / f"{i:06d}.csv").write_text("\n".join(rows) + "\n")
    save_tum(out / "gt_traj.tum", ds.gt_trajectory)
    write_ply(out / "gt_map.ply", ds.gt_map.points)
    stamps = [f"{s.stamp:.9f}" for s in ds.scans]
    (out / "stamps.txt").write_text("\n".join(stamps) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    meta = json.loads((root / "metadata.json").read_text())
    lid = meta["lidar"]
    model = LidarModel(
        azimuth_count=int(lid["azimuth_count"]),
        elevation_angles=tuple(lid["elevation_angles"]),
        max_range=float(lid["max_range"]),
        min_range=float(lid["min_range"]),
        scan_period=float(lid["scan_period"]),
        scan_rate=float(lid["scan_rate"]),
    )
    stamps = [float(s) for s in (root / "stamps.txt").read_text().split()]
    scans = []
    for i, stamp in enumerate(stamps):
        raw = np.loadtxt(
            root / "scans" / f"{i:06d}.csv", delimiter=",", skiprows=1, ndmin=2
        )
        scans.append(
            LidarScan(
                raw[:, 0:3],
                raw[:, 3],
                raw[:, 4],
                raw[:, 5].astype(np.int64),
                raw[:, 6].astype(np.int64),
                stamp,
            )
        )
    gt_traj = load_tum(root / "gt_traj.tum")
    verts, _ = read_ply(root / "gt_map.ply")
    bounds = None
    if meta.get("scene_bounds"):
        bounds = (np.asarray(meta["scene_bounds"][0]), np.asarray(meta["scene_bounds"][1]))
    return Dataset(
        scans,
        gt_traj,
        PointCloud(verts),
        model,
        meta.get("scene", ""),
        bounds,
        int(meta.get("seed", 0)),
    )
