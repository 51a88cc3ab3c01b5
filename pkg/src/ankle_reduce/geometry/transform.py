"""Similarity transforms and mirror planes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError

_ORTHO_TOL = 1e-9


def _frozen(a, shape, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if arr.shape != shape:
        raise InputError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """``v -> scale * R @ v + translation``.

    Rotation, translation and scale are kept apart so that rigid-only code
    can check ``scale == 1`` without decomposing a fused matrix.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        s = float(self.scale)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)) or not np.isfinite(s):
            raise InputError("transform has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise InputError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InputError("rotation determinant is not +1")
        if s <= 0:
            raise InputError("scale must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_matrix(cls, matrix, scale: float | None = None) -> "SimilarityTransform":
        """Build from a 4x4 homogeneous matrix whose upper block is ``s R``."""
        m = np.asarray(matrix, dtype=np.float64)
        A = m[:3, :3]
        if scale is None:
            scale = np.cbrt(np.linalg.det(A))
        return cls(A / scale, m[:3, 3], scale)

    @property
    def is_rigid(self) -> bool:
        return self.scale == 1.0

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix (row-major when flattened)."""
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def __matmul__(self, other: "SimilarityTransform") -> "SimilarityTransform":
        return compose(self, other)

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.ravel().tolist(),
            "rotation": self.rotation.ravel().tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(np.reshape(d["rotation"], (3, 3)), d["translation"], d["scale"])

    def __repr__(self):
        return (
            f"SimilarityTransform(rotation={self.rotation.tolist()}, "
            f"translation={self.translation.tolist()}, scale={self.scale!r})"
        )


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def compose(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    """Transform mapping ``v`` to ``a(b(v))``."""
    R = a.rotation @ b.rotation
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-12:
        R = _reorthonormalize(R)
    t = a.scale * (a.rotation @ b.translation) + a.translation
    return SimilarityTransform(R, t, a.scale * b.scale)


def invert(t: SimilarityTransform) -> SimilarityTransform:
    Rt = t.rotation.T
    s_inv = 1.0 / t.scale
    return SimilarityTransform(Rt, -s_inv * (Rt @ t.translation), s_inv)


def rotation_about(axis, degrees: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    th = np.deg2rad(degrees)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)


def rotation_angle_deg(R) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = (np.trace(np.asarray(R)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True, eq=False)
class MirrorPlane:
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        p = _frozen(self.point, (3,))
        n = np.array(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if n.shape != (3,) or not norm > 0:
            raise InputError("mirror plane normal must be a nonzero 3-vector")
        # accept near-unit input, store exactly normalized
        if abs(norm - 1.0) > 1e-9:
            n = n / norm
        n.setflags(write=False)
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "normal", n)

    def reflect(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        d = (p - self.point) @ self.normal
        return p - 2.0 * d[..., None] * self.normal

    def reflect_directions(self, vectors) -> np.ndarray:
        v = np.asarray(vectors, dtype=np.float64)
        return v - 2.0 * (v @ self.normal)[..., None] * self.normal

    def shifted(self, distance: float) -> "MirrorPlane":
        return MirrorPlane(self.point + distance * self.normal, self.normal)
