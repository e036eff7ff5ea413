"""Bundled triangle-mesh scenes: closed and open-sky regimes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Scene:
    name: str
    triangles: np.ndarray  # (T, 3, 3)

    def __post_init__(self) -> None:
        tris = np.asarray(self.triangles, dtype=np.float64).reshape(-1, 3, 3)
        e1 = tris[:, 1] - tris[:, 0]
        e2 = tris[:, 2] - tris[:, 0]
        area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
        if (area2 <= 2e-12).any():
            raise ValueError("scene contains a degenerate triangle")
        tris.flags.writeable = False
        object.__setattr__(self, "triangles", tris)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = self.triangles.reshape(-1, 3)
        return pts.min(axis=0), pts.max(axis=0)


def _quad(p0, p1, p2, p3) -> list:
    """Two triangles covering the quad p0-p1-p2-p3 (in winding order)."""
    return [[p0, p1, p2], [p0, p2, p3]]


def _box(lo, hi, skip_bottom: bool = False, skip_top: bool = False) -> list:
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    tris = []
    tris += _quad([x0, y0, z0], [x1, y0, z0], [x1, y0, z1], [x0, y0, z1])  # y = y0
    tris += _quad([x0, y1, z0], [x1, y1, z0], [x1, y1, z1], [x0, y1, z1])  # y = y1
    tris += _quad([x0, y0, z0], [x0, y1, z0], [x0, y1, z1], [x0, y0, z1])  # x = x0
    tris += _quad([x1, y0, z0], [x1, y1, z0], [x1, y1, z1], [x1, y0, z1])  # x = x1
    if not skip_bottom:
        tris += _quad([x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0])
    if not skip_top:
        tris += _quad([x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1])
    return tris


def box_room(width: float = 10.0, depth: float = 10.0, height: float = 3.0) -> Scene:
    """Closed rectangular room centered on the z axis, floor at z=0."""
    lo = (-width / 2.0, -depth / 2.0, 0.0)
    hi = (width / 2.0, depth / 2.0, height)
    return Scene("box_room", np.array(_box(lo, hi)))


def courtyard(size: float = 20.0, wall_height: float = 4.0) -> Scene:
    """Open-top yard: ground, four perimeter walls, four interior pillars."""
    half = size / 2.0
    tris = _quad([-half, -half, 0.0], [half, -half, 0.0], [half, half, 0.0], [-half, half, 0.0])
    tris += _box((-half, -half, 0.0), (half, half, wall_height), skip_bottom=True, skip_top=True)
    for px, py in [(-4.0, -4.0), (4.0, -4.0), (-4.0, 4.0), (4.0, 4.0)]:
        tris += _box((px - 0.3, py - 0.3, 0.0), (px + 0.3, py + 0.3, 3.0), skip_bottom=True)
    return Scene("courtyard", np.array(tris))


def quad(size: float = 40.0, wall_height: float = 5.0) -> Scene:
    """Large open square with a perimeter wall, open sky."""
    half = size / 2.0
    tris = _quad([-half, -half, 0.0], [half, -half, 0.0], [half, half, 0.0], [-half, half, 0.0])
    tris += _box((-half, -half, 0.0), (half, half, wall_height), skip_bottom=True, skip_top=True)
    return Scene("quad", np.array(tris))


_SCENES = {"box_room": box_room, "courtyard": courtyard, "quad": quad}


def get_scene(name: str) -> Scene:
    if name not in _SCENES:
        raise KeyError(f"unknown scene {name!r}; available: {sorted(_SCENES)}")
    return _SCENES[name]()
