"""Spinning LiDAR model and single-scan ray casting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..geometry import Pose
from .raycast import BVH
from .scene import Scene

NO_RETURN = -1.0


def _default_elevations() -> tuple:
    return tuple(np.deg2rad(np.linspace(-15.0, 15.0, 16)))


@dataclass(frozen=True)
class LidarModel:
    azimuth_count: int = 360
    elevation_angles: tuple = field(default_factory=_default_elevations)
    max_range: float = 60.0
    min_range: float = 0.3
    scan_period: float = 0.2
    scan_rate: float = 5.0

    def __post_init__(self) -> None:
        if not (0.0 < self.min_range < self.max_range):
            raise ValueError("need 0 < min_range < max_range")
        elevs = tuple(float(e) for e in self.elevation_angles)
        if any(b <= a for a, b in zip(elevs, elevs[1:])):
            raise ValueError("elevation_angles must be strictly increasing")
        object.__setattr__(self, "elevation_angles", elevs)

    @property
    def n_elevations(self) -> int:
        return len(self.elevation_angles)

    def rays_per_scan(self) -> int:
        return self.azimuth_count * self.n_elevations

    def ray_grid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sensor-frame directions plus (az, el) indices, azimuth-major."""
        az = 2.0 * np.pi * np.arange(self.azimuth_count) / self.azimuth_count
        el = np.asarray(self.elevation_angles)
        az_idx = np.repeat(np.arange(self.azimuth_count), el.size)
        el_idx = np.tile(np.arange(el.size), self.azimuth_count)
        a = az[az_idx]
        e = el[el_idx]
        dirs = np.stack(
            [np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=1
        )
        return dirs, az_idx, el_idx

    def ray_timestamps(self, stamp: float, az_idx: np.ndarray) -> np.ndarray:
        """Linear in azimuth: first column fired at stamp - scan_period, last at stamp."""
        denom = max(self.azimuth_count - 1, 1)
        return stamp - self.scan_period + self.scan_period * az_idx / denom


@dataclass(frozen=True)
class LidarScan:
    directions: np.ndarray  # (N, 3) unit vectors, sensor frame
    ranges: np.ndarray  # (N,), NO_RETURN where the ray escaped
    timestamps: np.ndarray  # (N,)
    az_idx: np.ndarray  # (N,) int
    el_idx: np.ndarray  # (N,) int
    stamp: float

    def __post_init__(self) -> None:
        for name in ("directions", "ranges", "timestamps"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for name in ("az_idx", "el_idx"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))

    def __len__(self) -> int:
        return self.ranges.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.ranges > 0.0

    def points(self) -> np.ndarray:
        """Sensor-frame hit points of the valid rays."""
        m = self.valid
        return self.directions[m] * self.ranges[m][:, None]


def _cast(
    bvh: BVH, origins: np.ndarray, dirs: np.ndarray, model: LidarModel
) -> np.ndarray:
    t, _ = bvh.intersect(origins, dirs, t_min=model.min_range)
    r = np.where(np.isfinite(t) & (t <= model.max_range), t, NO_RETURN)
    return r


def cast_scan(
    scene: Scene,
    pose: Pose,
    model: LidarModel,
    stamp: float,
    bvh: Optional[BVH] = None,
    ray_poses: Optional[Sequence[Pose]] = None,
) -> LidarScan:
    """One full sweep from `pose`. `ray_poses`, when given, holds one pose per
    azimuth column so intra-scan motion shows up in the ranges."""
    if bvh is None:
        bvh = BVH(scene.triangles)
    dirs, az_idx, el_idx = model.ray_grid()
    ts = model.ray_timestamps(stamp, az_idx)
    if ray_poses is None:
        world_dirs = dirs @ pose.rotation.T
        origins = np.broadcast_to(pose.translation, world_dirs.shape)
    else:
        if len(ray_poses) != model.azimuth_count:
            raise ValueError("need one pose per azimuth column")
        rots = np.stack([p.rotation for p in ray_poses])  # (A, 3, 3)
        trans = np.stack([p.translation for p in ray_poses])
        world_dirs = np.einsum("nij,nj->ni", rots[az_idx], dirs)
        origins = trans[az_idx]
    ranges = _cast(bvh, origins, world_dirs, model)
    return LidarScan(dirs, ranges, ts, az_idx, el_idx, stamp)
