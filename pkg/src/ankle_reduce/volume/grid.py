"""Regular 3D scalar grids with explicit world geometry."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import InputError, TooSmall

_DIR_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Grid geometry without data.

    Continuous index ``(0, 0, 0)`` is the center of the first voxel and
    ``world = origin + direction @ diag(spacing) @ ijk``.
    """

    dims: tuple
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise InputError(f"dims must be three positive ints, got {self.dims}")
        sp = np.array(self.spacing, dtype=np.float64).reshape(3)
        org = np.array(self.origin, dtype=np.float64).reshape(3)
        D = np.array(self.direction, dtype=np.float64).reshape(3, 3)
        if np.any(sp <= 0):
            raise InputError("spacing must be positive")
        if np.max(np.abs(D.T @ D - np.eye(3))) > _DIR_TOL:
            raise InputError("direction matrix is not orthonormal")
        for a in (sp, org, D):
            a.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", org)
        object.__setattr__(self, "direction", D)

    @classmethod
    def around(cls, lo, hi, spacing: float, margin: float = 0.0) -> "GridSpec":
        """Axis-aligned grid whose voxel centers cover ``[lo - margin, hi + margin]``."""
        lo = np.asarray(lo, dtype=np.float64) - margin
        hi = np.asarray(hi, dtype=np.float64) + margin
        dims = np.maximum(1, np.ceil((hi - lo) / spacing).astype(int) + 1)
        return cls(tuple(dims), np.full(3, float(spacing)), lo)

    @property
    def affine(self) -> np.ndarray:
        """4x4 index-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.direction * self.spacing
        m[:3, 3] = self.origin
        return m

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def index_to_world(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.float64)
        return ijk @ (self.direction * self.spacing).T + self.origin

    def world_to_index(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        A = self.direction * self.spacing
        return np.linalg.solve(A, (p - self.origin).T).T if p.ndim > 1 else np.linalg.solve(A, p - self.origin)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, x-fastest order."""
        k, j, i = np.meshgrid(*(np.arange(n) for n in self.dims[::-1]), indexing="ij")
        ijk = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
        return self.index_to_world(ijk)

    def same_geometry(self, other: "GridSpec", tol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
            and np.allclose(self.direction, other.direction, atol=tol)
        )

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": self.spacing.tolist(),
            "origin": self.origin.tolist(),
            "direction": self.direction.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["dims"]), d.get("spacing", (1, 1, 1)), d.get("origin", (0, 0, 0)),
                   np.reshape(d.get("direction", np.eye(3).ravel()), (3, 3)))


@dataclass(frozen=True, eq=False)
class Volume3:
    """Scalar volume; ``data[i, j, k]`` with ``i`` the fastest file axis."""

    data: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim != 3:
            raise InputError("volume data must be 3D")
        if tuple(data.shape) != self.grid.dims:
            raise InputError(f"data shape {data.shape} != grid dims {self.grid.dims}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, grid: GridSpec, dtype=np.float64) -> "Volume3":
        return cls(np.zeros(grid.dims, dtype=dtype), grid)

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def origin(self):
        return self.grid.origin

    @property
    def direction(self):
        return self.grid.direction

    def with_data(self, data) -> "Volume3":
        return Volume3(data, self.grid)

    def flat(self) -> np.ndarray:
        """Data in x-fastest order."""
        return self.data.ravel(order="F")


def gaussian_blur(v: Volume3, sigma_mm: float) -> Volume3:
    """Separable Gaussian, truncated at 3 sigma, nearest-edge padding."""
    if sigma_mm <= 0:
        return v.with_data(v.data.astype(np.float64))
    sig_vox = sigma_mm / v.spacing
    out = ndimage.gaussian_filter(v.data.astype(np.float64), sigma=sig_vox, truncate=3.0, mode="nearest")
    return v.with_data(out)


def gradient_magnitude(v: Volume3) -> Volume3:
    """Euclidean norm of the central-difference gradient in physical units.

    Boundary voxels use one-sided differences.
    """
    if min(v.dims) < 3:
        raise TooSmall(f"gradient needs at least 3 voxels per axis, got {v.dims}")
    gx, gy, gz = np.gradient(v.data.astype(np.float64), *v.spacing, edge_order=1)
    return v.with_data(np.sqrt(gx * gx + gy * gy + gz * gz))


def sample_trilinear(v: Volume3, points, outside_value: float = 0.0) -> np.ndarray:
    """Trilinear interpolation at world points; outside the grid returns ``outside_value``.

    Accepts a single 3-vector (returns a float) or an ``(k, 3)`` array.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    c = v.grid.world_to_index(pts)
    snapped = np.round(c)
    c = np.where(np.abs(c - snapped) < 1e-9, snapped, c)
    dims = np.array(v.dims)
    inside = np.all((c >= 0) & (c <= dims - 1), axis=1)
    i0 = np.clip(np.floor(c).astype(np.int64), 0, np.maximum(dims - 2, 0))
    f = c - i0
    f = np.where(dims == 1, 0.0, f)
    i1 = np.minimum(i0 + 1, dims - 1)
    data = v.data
    out = np.zeros(len(c))
    for corner in range(8):
        sel = [(corner >> a) & 1 for a in range(3)]
        idx = [np.where(sel[a], i1[:, a], i0[:, a]) for a in range(3)]
        w = np.ones(len(c))
        for a in range(3):
            w = w * (f[:, a] if sel[a] else 1.0 - f[:, a])
        out += w * data[idx[0], idx[1], idx[2]]
    out = np.where(inside, out, outside_value)
    return float(out[0]) if single else out
