"""Minimal ASCII OBJ reader/writer (``v`` and ``f`` records only)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import EmptyMesh, InputError, NonTriangular
from .mesh import TriangleMesh


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise InputError(f"{path}:{lineno}: bad vertex record") from exc
            elif tag == "f":
                idx = parts[1:]
                if len(idx) != 3:
                    raise NonTriangular(f"{path}:{lineno}: face with {len(idx)} vertices")
                try:
                    faces.append([int(tok.split("/")[0]) - 1 for tok in idx])
                except ValueError as exc:
                    raise InputError(f"{path}:{lineno}: bad face record") from exc
    if not verts:
        raise EmptyMesh(f"{path}: no vertices")
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
