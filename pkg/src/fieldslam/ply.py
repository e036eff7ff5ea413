"""Minimal ASCII PLY reader/writer (vertices, optional triangular faces)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np


def write_ply(
    path: str | Path, vertices: np.ndarray, faces: Optional[np.ndarray] = None
) -> None:
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {vertices.shape[0]}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        lines.append(f"element face {faces.shape[0]}")
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    for v in vertices:
        lines.append(f"{v[0]:.9f} {v[1]:.9f} {v[2]:.9f}")
    if faces is not None:
        for f in faces:
            lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path: str | Path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError("not a PLY file")
    n_vert = 0
    n_face = 0
    i = 1
    while i < len(text):
        line = text[i].strip()
        i += 1
        if line == "end_header":
            break
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[0] == "format" and parts[1] != "ascii":
            raise ValueError("only ascii PLY is supported")
    else:
        raise ValueError("missing end_header")
    verts = np.array(
        [[float(x) for x in text[i + j].split()[:3]] for j in range(n_vert)]
    ).reshape(n_vert, 3)
    faces = None
    if n_face:
        rows = []
        for j in range(n_face):
            parts = text[i + n_vert + j].split()
            if int(parts[0]) != 3:
                raise ValueError("only triangular faces are supported")
            rows.append([int(parts[1]), int(parts[2]), int(parts[3])])
        faces = np.asarray(rows, dtype=np.int64)
    return verts, faces
