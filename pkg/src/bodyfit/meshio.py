"""Wavefront OBJ import/export.

Only v/f records are written; faces are 1-based triangles. Coordinates are
printed with 9 significant digits, so export -> import -> export is
byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def export_mesh(vertices, faces, path) -> None:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 3 or len(vertices) == 0:
        raise ValueError("vertices must be a non-empty (N, 3) array")
    if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
        raise ValueError("faces must be a non-empty (F, 3) array")
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise ValueError("face index out of range")
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def import_mesh(path):
    """Returns (vertices, faces). Tolerates v/vt/vn-style face tokens."""
    verts = []
    faces = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise ValueError(f"line {ln}: vertex needs 3 coordinates")
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError(f"line {ln}: only triangles are supported")
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    if not verts or not faces:
        raise ValueError("mesh has no vertices or no faces")
    vertices = np.array(verts, dtype=np.float64)
    face_arr = np.array(faces, dtype=np.int64)
    if face_arr.min() < 0 or face_arr.max() >= len(vertices):
        raise ValueError("face index out of range")
    return vertices, face_arr
