"""Triangle meshes with fixed topology, and the basic operations on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateVertex, EmptyMesh, InvalidMesh
from .transform import MirrorPlane, SimilarityTransform

_NORMAL_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Vertices in mm and counter-clockwise (outward) triangle faces.

    Arrays are copied and made read-only on construction.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64, copy=True).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise InvalidMesh("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise InvalidMesh("face repeats a vertex")
        if not np.all(np.isfinite(v)):
            raise InvalidMesh("non-finite vertex coordinates")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same topology, new positions."""
        v = np.asarray(vertices, dtype=np.float64)
        if v.shape != self.vertices.shape:
            raise InvalidMesh(f"expected {self.vertices.shape} vertices, got {v.shape}")
        out = TriangleMesh.__new__(TriangleMesh)
        v = np.array(v, copy=True)
        v.setflags(write=False)
        object.__setattr__(out, "vertices", v)
        object.__setattr__(out, "faces", self.faces)
        return out

    def same_topology(self, other: "TriangleMesh") -> bool:
        return self.vertices.shape == other.vertices.shape and np.array_equal(
            self.faces, other.faces
        )

    def triangles(self) -> np.ndarray:
        """(m, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    def require_nonempty(self):
        if self.n_vertices == 0 or self.n_faces == 0:
            raise EmptyMesh("mesh has no vertices or no faces")


def face_normals(mesh: TriangleMesh, unit: bool = True) -> np.ndarray:
    tri = mesh.triangles()
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if unit:
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            n = n / norm
    return n


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(mesh, unit=False), axis=1)


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Unit normal per vertex: normalized area-weighted sum of face normals.

    Raises
    ------
    DegenerateVertex
        If a vertex is unreferenced or its summed normal vanishes.
    """
    # unnormalized cross product is 2*area*unit_normal, i.e. area weighting
    fn = face_normals(mesh, unit=False)
    acc = np.zeros_like(mesh.vertices)
    for corner in range(3):
        np.add.at(acc, mesh.faces[:, corner], fn)
    counts = np.bincount(mesh.faces.ravel(), minlength=mesh.n_vertices)
    unused = np.flatnonzero(counts == 0)
    if unused.size:
        raise DegenerateVertex(unused[0], "no incident faces")
    norm = np.linalg.norm(acc, axis=1)
    bad = np.flatnonzero(norm < _NORMAL_EPS)
    if bad.size:
        raise DegenerateVertex(bad[0], "incident normals cancel")
    return acc / norm[:, None]


def apply_transform(mesh: TriangleMesh, t: SimilarityTransform) -> TriangleMesh:
    """Map every vertex through ``t``; the face array is shared, not rebuilt."""
    return mesh.with_vertices(t.apply(mesh.vertices))


def mirror(mesh: TriangleMesh, plane: MirrorPlane) -> TriangleMesh:
    """Reflect across ``plane`` and reverse winding so normals stay outward."""
    faces = mesh.faces[:, ::-1]
    return TriangleMesh(plane.reflect(mesh.vertices), faces)


def signed_volume(mesh: TriangleMesh) -> float:
    tri = mesh.triangles()
    return float(np.sum(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))) / 6.0)


def edge_use_counts(mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray]:
    """Undirected edges and how many faces use each."""
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    e.sort(axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    return edges, counts


def is_closed(mesh: TriangleMesh) -> bool:
    if mesh.n_faces == 0:
        return False
    _, counts = edge_use_counts(mesh)
    return bool(np.all(counts == 2))


def centroid(mesh: TriangleMesh) -> np.ndarray:
    return mesh.vertices.mean(axis=0)


def merge(meshes) -> TriangleMesh:
    """Concatenate meshes into one (disjoint components)."""
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += m.n_vertices
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


# -- primitives ------------------------------------------------------------

def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere; vertex count is ``10 * 4**subdivisions + 2``."""
    g = (1.0 + 5 ** 0.5) / 2.0
    v = [
        (-1, g, 0), (1, g, 0), (-1, -g, 0), (1, -g, 0),
        (0, -1, g), (0, 1, g), (0, -1, -g), (0, 1, -g),
        (g, 0, -1), (g, 0, 1), (-g, 0, -1), (-g, 0, 1),
    ]
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                p = verts[i] + verts[j]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    V = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(V, np.array(faces))


def icosphere_level_for(n_vertices: int) -> int:
    """Smallest subdivision level with at least ``n_vertices`` vertices."""
    level = 0
    while 10 * 4 ** level + 2 < n_vertices:
        level += 1
    return level


def box(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """Axis-aligned box, 8 vertices and 12 outward triangles."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    V = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    # vertex index bits: x=1, y=2, z=4; every quad starts at an even-parity
    # corner so all diagonals join {0, 3, 5, 6} and corner normals are symmetric
    quads = [
        (0, 2, 3, 1),  # z = lo
        (5, 7, 6, 4),  # z = hi
        (0, 1, 5, 4),  # y = lo
        (6, 7, 3, 2),  # y = hi
        (0, 4, 6, 2),  # x = lo
        (3, 7, 5, 1),  # x = hi
    ]
    F = []
    for a, b, c, d in quads:
        F += [(a, b, c), (a, c, d)]
    return TriangleMesh(V, np.array(F))
