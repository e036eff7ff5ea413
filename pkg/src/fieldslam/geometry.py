"""Rigid-body transforms, twists, point clouds, and trajectory I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def rotation_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula. Series fallback keeps small angles exact to O(theta^6)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    if theta2 < 1e-8:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        theta = math.sqrt(theta2)
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    k = _skew(omega)
    return np.eye(3) + a * k + b * (k @ k)


def rotation_log(rot: np.ndarray) -> np.ndarray:
    """Inverse of rotation_exp, returning the angle-bounded twist (|omega| <= pi).

    At angle exactly pi the axis sign is ambiguous; we pick the sign that makes
    the first component with magnitude > 1e-8 positive.
    """
    rot = np.asarray(rot, dtype=np.float64)
    cos_theta = min(1.0, max(-1.0, (np.trace(rot) - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    v = _vee(rot - rot.T) / 2.0  # sin(theta) * axis

    if theta < 1e-5:
        # theta/(2 sin theta) expanded; v already carries the sin factor
        return v * (1.0 + theta * theta / 6.0 + 7.0 * theta ** 4 / 360.0)

    if math.pi - theta < 1e-6:
        # (R + I)/2 = k k^T at pi; read the axis off the strongest column.
        # acos loses ~sqrt(ulp) near pi, so refine the angle from |sin| instead.
        m = (rot + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(m)))
        k = m[:, i] / math.sqrt(max(m[i, i], 1e-18))
        k = k / np.linalg.norm(k)
        theta = math.pi - math.asin(min(1.0, float(np.linalg.norm(v))))
        s = float(v @ k)
        if abs(s) > 1e-12:
            if s < 0.0:
                k = -k
        else:
            for j in range(3):
                if abs(k[j]) > 1e-8:
                    if k[j] < 0.0:
                        k = -k
                    break
        return theta * k

    return v * (theta / math.sin(theta))


@dataclass(frozen=True)
class Pose:
    """Rigid transform; maps local coordinates to parent: x' = R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(m[:3, :3], m[:3, 3])

    def renormalized(self) -> "Pose":
        """Project the rotation back onto SO(3); composition chains drift otherwise."""
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0.0:
            u = u.copy()
            u[:, -1] = -u[:, -1]
            r = u @ vt
        return Pose(r, self.translation)


@dataclass(frozen=True)
class Twist:
    """se(3) element under the split parameterization: rotation via Rodrigues
    on omega, translation carried directly in v (no V-matrix coupling)."""

    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.omega, dtype=np.float64)
        v = np.array(self.v, dtype=np.float64)
        if w.shape != (3,) or v.shape != (3,):
            raise ValueError("twist needs two 3-vectors")
        w.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "v", v)

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    @staticmethod
    def from_vector(x: np.ndarray) -> "Twist":
        x = np.asarray(x, dtype=np.float64)
        return Twist(x[:3], x[3:6])


def se3_exp(xi: Twist) -> Pose:
    return Pose(rotation_exp(xi.omega), xi.v)


def se3_log(pose: Pose) -> Twist:
    return Twist(rotation_log(pose.rotation), pose.translation)


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    cos_theta = min(1.0, max(-1.0, (np.trace(np.asarray(rot)) - 1.0) / 2.0))
    return math.acos(cos_theta)


def interpolate_pose(p0: Pose, p1: Pose, u: float) -> Pose:
    """Screw-free interpolation: lerp translation, slerp rotation. u in [0, 1]
    interpolates; values outside extrapolate at constant velocity."""
    omega = rotation_log(p0.rotation.T @ p1.rotation)
    rot = p0.rotation @ rotation_exp(u * omega)
    trans = (1.0 - u) * p0.translation + u * p1.translation
    return Pose(rot, trans)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    timestamps: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    normal_valid: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", p)
        if self.timestamps is not None:
            object.__setattr__(
                self, "timestamps", np.asarray(self.timestamps, dtype=np.float64)
            )
        if self.normals is not None:
            object.__setattr__(
                self, "normals", np.asarray(self.normals, dtype=np.float64)
            )
        if self.normal_valid is not None:
            object.__setattr__(
                self, "normal_valid", np.asarray(self.normal_valid, dtype=bool)
            )

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, pose: Pose) -> "PointCloud":
        normals = None
        if self.normals is not None:
            normals = self.normals @ pose.rotation.T
        return PointCloud(pose.apply(self.points), self.timestamps, normals, self.normal_valid)


def estimate_normals(cloud: PointCloud, k: int = 10) -> PointCloud:
    """Per-point normals from k-NN covariance, oriented toward the sensor origin.

    Neighborhoods whose covariance is rank-deficient (collinear or isolated
    points) get normal_valid=False.
    """
    pts = cloud.points
    n = pts.shape[0]
    normals = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    if n >= 3:
        kk = min(k, n - 1)
        tree = cKDTree(pts)
        _, idx = tree.query(pts, k=kk + 1)
        nbrs = pts[idx]  # (n, kk+1, 3)
        centered = nbrs - nbrs.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered) / (kk + 1)
        lam, vec = np.linalg.eigh(cov)
        normals = vec[:, :, 0]
        valid = lam[:, 1] > (1e-8 * lam[:, 2] + 1e-18)
        flip = np.einsum("ni,ni->n", normals, pts) > 0.0
        normals = np.where(flip[:, None], -normals, normals)
    return PointCloud(pts, cloud.timestamps, normals, valid)


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """One centroid per occupied voxel, voxels ordered lexicographically."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    pts = points[order]
    uniq, start, counts = np.unique(
        keys, axis=0, return_index=True, return_counts=True
    )
    out = np.add.reduceat(pts, start, axis=0) / counts[:, None]
    del uniq
    return out


def load_tum(path: str | Path) -> list[tuple[float, Pose]]:
    """Read a trajectory file: `timestamp tx ty tz qx qy qz qw` per line."""
    traj: list[tuple[float, Pose]] = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 8:
            raise ValueError(f"expected 8 fields per trajectory line, got {len(vals)}")
        t, tx, ty, tz = vals[0], vals[1], vals[2], vals[3]
        rot = Rotation.from_quat(vals[4:8]).as_matrix()
        traj.append((t, Pose(rot, np.array([tx, ty, tz]))))
    return traj


def save_tum(path: str | Path, traj: Sequence[tuple[float, Pose]]) -> None:
    lines = []
    for t, pose in traj:
        q = Rotation.from_matrix(pose.rotation).as_quat()
        if q[3] < 0.0:
            q = -q
        tx, ty, tz = pose.translation
        lines.append(
            f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} "
            f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
