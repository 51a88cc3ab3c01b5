"""Deterministic synthetic bones, populations, volumes and fractures.

Random numbers come from numpy's counter-based Philox generator keyed by
``SeedSequence([seed, stream, index, attempt])`` with these substreams:

==========  =====  ==================================================
stream      id     use
==========  =====  ==================================================
POPULATION  1      mode coefficients of population member ``index``
NOISE       2      additive image noise of volume ``index``
RESAMPLE    (attempt > 0 on POPULATION) redraws after a folded sample
==========  =====  ==================================================

Mode displacement fields are smooth analytic functions of the base vertex
positions in each bone's local frame (bone axis along z). Each field is
flattened to a 3n-vector, optionally made orthogonal to the similarity
tangent space of the base shape (so Procrustes alignment cannot absorb
it) and to earlier fields, and scaled to unit Euclidean norm. A mode with
variance ``v`` therefore contributes an eigenvalue ``v`` (mm^2) to the
covariance of the flattened shapes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, PlaneMisses
from .geometry import (
    SimilarityTransform,
    TriangleMesh,
    apply_transform,
    face_normals,
    icosphere,
    icosphere_level_for,
)
from .volume import GridSpec, Volume3, gaussian_blur, voxelize

STREAM_POPULATION = 1
STREAM_NOISE = 2
MAX_RESAMPLES = 100

BONE_INTENSITY = 1000.0
QUALITY = {
    "high": {"noise_sigma": 10.0, "blur_mm": 0.5},
    "low": {"noise_sigma": 50.0, "blur_mm": 1.5},
}

BASE_DEFAULTS = {
    "superellipsoid": {"axes": [18.0, 12.0, 10.0], "exponent": 2.5},
    "tube": {"length": 60.0, "radius": 6.0, "aspect": 0.7, "flare": 0.6, "flare_z": -22.0,
             "flare_width": 8.0, "bend": 2.0},
    "two_bone_joint": {"upper_axes": [10.0, 10.0, 14.0], "lower_axes": [12.0, 12.0, 9.0],
                       "exponent": 3.0},
}


def rng_for(seed: int, stream: int, index: int = 0, attempt: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stream, index, attempt])
    return np.random.Generator(np.random.Philox(ss))


# -- base shapes -------------------------------------------------------------

def _superellipsoid(unit: np.ndarray, axes, exponent: float) -> np.ndarray:
    F = np.sum(np.abs(unit) ** exponent, axis=1) ** (1.0 / exponent)
    return unit * np.asarray(axes, dtype=np.float64) / F[:, None]


def _tube(unit: np.ndarray, p: dict) -> np.ndarray:
    """Capsule meridian parametrized by arc length, with a distal flare and a bend.

    The cross-section is elliptical (``aspect`` = y/x) and the flare bulges
    toward +x only, so the shape has no rotational symmetry about its axis.
    """
    r = float(p["radius"])
    lc = float(p["length"]) - 2 * r
    if lc <= 0:
        raise InputError("tube length must exceed its diameter")
    S = np.pi * r + lc
    theta = np.arccos(np.clip(-unit[:, 2], -1, 1))  # 0 at the distal (bottom) pole
    s = S * theta / np.pi
    rho = np.empty_like(s)
    z = np.empty_like(s)
    cap = np.pi * r / 2
    lo = s <= cap
    hi = s >= cap + lc
    mid = ~lo & ~hi
    a = s[lo] / r
    rho[lo], z[lo] = r * np.sin(a), -lc / 2 - r * np.cos(a)
    rho[mid], z[mid] = r, -lc / 2 + (s[mid] - cap)
    a = (S - s[hi]) / r
    rho[hi], z[hi] = r * np.sin(a), lc / 2 + r * np.cos(a)
    xy = unit[:, :2]
    nrm = np.linalg.norm(xy, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        dirs = np.where(nrm > 1e-12, xy / nrm, 0.0)
    side = 0.5 * (1.0 + dirs[:, 0])
    rho = rho * (1 + p["flare"] * side * np.exp(-(((z - p["flare_z"]) / p["flare_width"]) ** 2)))
    out = np.c_[rho * dirs[:, 0], p["aspect"] * rho * dirs[:, 1], z]
    half = p["length"] / 2
    out[:, 0] += p["bend"] * (z / half) ** 2
    return out


@dataclass(frozen=True)
class ModeDef:
    field: str
    variance: float
    params: dict = field(default_factory=dict)
    bone: str | None = None

    def to_dict(self):
        d = {"field": self.field, "variance": self.variance, "params": dict(self.params)}
        if self.bone is not None:
            d["bone"] = self.bone
        return d


@dataclass(frozen=True)
class PhantomSpec:
    base_shape: str = "superellipsoid"
    n_landmarks: int = 642
    modes: tuple = ()
    joint_gap: float = 1.0
    seed: int = 0
    base_params: dict = field(default_factory=dict)
    project_similarity: bool | None = None

    def __post_init__(self):
        if self.base_shape not in BASE_DEFAULTS:
            raise InputError(f"unknown base_shape {self.base_shape!r}; expected one of {sorted(BASE_DEFAULTS)}")
        if int(self.n_landmarks) < 42:
            raise InputError("n_landmarks must be >= 42")
        if self.joint_gap < 0:
            raise InputError("joint_gap must be >= 0")
        modes = tuple(m if isinstance(m, ModeDef) else ModeDef(**m) for m in self.modes)
        for m in modes:
            if not m.variance >= 0:
                raise InputError("mode variances must be nonnegative")
            if m.field not in FIELDS:
                raise InputError(f"unknown mode field {m.field!r}; expected one of {sorted(FIELDS)}")
        object.__setattr__(self, "modes", modes)

    @property
    def bones(self) -> tuple:
        return ("upper", "lower") if self.base_shape == "two_bone_joint" else ("bone",)

    @property
    def params(self) -> dict:
        p = dict(BASE_DEFAULTS[self.base_shape])
        p.update(self.base_params)
        return p

    @property
    def projects_similarity(self) -> bool:
        if self.project_similarity is not None:
            return bool(self.project_similarity)
        return self.base_shape != "two_bone_joint"

    def to_dict(self) -> dict:
        return {
            "base_shape": self.base_shape,
            "n_landmarks": self.n_landmarks,
            "modes": [m.to_dict() for m in self.modes],
            "joint_gap": self.joint_gap,
            "seed": self.seed,
            "base_params": dict(self.base_params),
            "project_similarity": self.project_similarity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {"base_shape", "n_landmarks", "modes", "joint_gap", "seed", "base_params",
                 "project_similarity"}
        extra = set(d) - known
        if extra:
            raise InputError(f"unknown phantom spec fields: {sorted(extra)}")
        return cls(**{k: (tuple(v) if k == "modes" else v) for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: cannot read phantom spec ({exc})") from exc
        if not isinstance(d, dict):
            raise InputError(f"{path}: phantom spec must be a JSON object")
        try:
            return cls.from_dict(d)
        except TypeError as exc:
            raise InputError(f"{path}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class BasePhantom:
    mesh: TriangleMesh
    bone_vertices: dict  # bone -> slice of vertex indices
    bone_faces: dict  # bone -> slice of face indices
    local_centers: dict  # bone -> center of its local frame


def base_phantom(spec: PhantomSpec) -> BasePhantom:
    level = icosphere_level_for(spec.n_landmarks)
    sphere = icosphere(level)
    unit = sphere.vertices
    p = spec.params
    if spec.base_shape == "superellipsoid":
        V = _superellipsoid(unit, p["axes"], p["exponent"])
        n = len(V)
        return BasePhantom(TriangleMesh(V, sphere.faces), {"bone": slice(0, n)},
                           {"bone": slice(0, sphere.n_faces)}, {"bone": np.zeros(3)})
    if spec.base_shape == "tube":
        V = _tube(unit, p)
        V = V - V.mean(axis=0)
        n = len(V)
        return BasePhantom(TriangleMesh(V, sphere.faces), {"bone": slice(0, n)},
                           {"bone": slice(0, sphere.n_faces)}, {"bone": np.zeros(3)})
    # two bones stacked on z; flat-ish poles face each other across the gap
    up = np.asarray(p["upper_axes"], dtype=np.float64)
    lo = np.asarray(p["lower_axes"], dtype=np.float64)
    g = float(spec.joint_gap)
    cu = np.array([0.0, 0.0, up[2] + g / 2])
    cl = np.array([0.0, 0.0, -(lo[2] + g / 2)])
    Vu = _superellipsoid(unit, up, p["exponent"]) + cu
    Vl = _superellipsoid(unit, lo, p["exponent"]) + cl
    n, m = len(unit), sphere.n_faces
    mesh = TriangleMesh(np.vstack([Vu, Vl]), np.vstack([sphere.faces, sphere.faces + n]))
    return BasePhantom(mesh, {"upper": slice(0, n), "lower": slice(n, 2 * n)},
                       {"upper": slice(0, m), "lower": slice(m, 2 * m)}, {"upper": cu, "lower": cl})


def split_bones(base: BasePhantom, mesh: TriangleMesh) -> dict:
    """Per-bone meshes of a (possibly multi-bone) phantom mesh."""
    out = {}
    for bone, vs in base.bone_vertices.items():
        fs = base.bone_faces[bone]
        out[bone] = TriangleMesh(mesh.vertices[vs], base.mesh.faces[fs] - vs.start)
    return out


# -- displacement fields -----------------------------------------------------------
# each maps local coordinates (n, 3) and the bone half-length to (n, 3)

def _f_bulge(v, half, z0=0.0, width=0.5):
    w = np.exp(-(((v[:, 2] / half) - z0) / width) ** 2)
    return np.c_[v[:, 0] * w, v[:, 1] * w, np.zeros(len(v))]


def _f_bend(v, half, angle_deg=0.0):
    a = np.deg2rad(angle_deg)
    u = (v[:, 2] / half) ** 2
    return np.c_[np.cos(a) * u, np.sin(a) * u, np.zeros(len(v))]


def _f_torsion(v, half):
    u = v[:, 2] / half
    return np.c_[-v[:, 1] * u, v[:, 0] * u, np.zeros(len(v))]


def _f_taper(v, half):
    u = v[:, 2] / half
    return np.c_[v[:, 0] * u, v[:, 1] * u, np.zeros(len(v))]


def _f_elongate(v, half):
    u = v[:, 2] / half
    return np.c_[np.zeros(len(v)), np.zeros(len(v)), v[:, 2] * u * u]


def _f_flatten(v, half, angle_deg=0.0):
    a = np.deg2rad(angle_deg)
    d = np.array([np.cos(a), np.sin(a), 0.0])
    return np.outer(v @ d, d)


def _f_bump(v, half, direction=(1.0, 0.0, 0.0), width=0.6):
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    r = np.linalg.norm(v, axis=1, keepdims=True)
    u = v / np.maximum(r, 1e-12)
    w = np.exp(-((1.0 - u @ d) / width) ** 2)
    return u * w[:, None]


FIELDS = {
    "bulge": _f_bulge,
    "bend": _f_bend,
    "torsion": _f_torsion,
    "taper": _f_taper,
    "elongate": _f_elongate,
    "flatten": _f_flatten,
    "bump": _f_bump,
}


def _similarity_tangent(V: np.ndarray) -> np.ndarray:
    """Orthonormal basis (3n, 7) of infinitesimal similarity motions at ``V``."""
    c = V - V.mean(axis=0)
    cols = []
    for k in range(3):
        t = np.zeros_like(V)
        t[:, k] = 1.0
        cols.append(t.ravel())
    for k in range(3):
        w = np.zeros(3)
        w[k] = 1.0
        cols.append(np.cross(w, c).ravel())
    cols.append(c.ravel())
    Q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return Q


def mode_fields(spec: PhantomSpec, base: BasePhantom | None = None) -> np.ndarray:
    """(3n, k) matrix of unit-norm, mutually orthogonal mode displacement vectors."""
    base = base or base_phantom(spec)
    V = base.mesh.vertices
    tangents = {b: _similarity_tangent(V[s]) for b, s in base.bone_vertices.items()}
    cols = []
    for m in spec.modes:
        f = np.zeros_like(V)
        targets = [m.bone] if m.bone else list(base.bone_vertices)
        for bone in targets:
            if bone not in base.bone_vertices:
                raise InputError(f"mode targets unknown bone {bone!r}")
            s = base.bone_vertices[bone]
            local = V[s] - base.local_centers[bone]
            half = float(np.max(np.abs(local[:, 2])))
            fb = FIELDS[m.field](local, half, **m.params)
            if spec.projects_similarity:
                Q = tangents[bone]
                flat = fb.ravel()
                fb = (flat - Q @ (Q.T @ flat)).reshape(-1, 3)
            f[s] = fb
        v = f.ravel()
        for c in cols:
            v = v - c * (c @ v)
        nv = np.linalg.norm(v)
        if nv < 1e-9:
            raise InputError(f"mode field {m.field!r} is degenerate on this base shape")
        cols.append(v / nv)
    if not cols:
        return np.zeros((V.size, 0))
    return np.stack(cols, axis=1)


# -- populations -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Population:
    """Corresponded meshes plus the coefficients that generated them."""

    spec: PhantomSpec
    base: BasePhantom
    fields: np.ndarray
    meshes: list
    coefficients: np.ndarray  # (N, k)
    resamples: list  # (member index, attempts used)

    def __len__(self):
        return len(self.meshes)

    def __iter__(self):
        return iter(self.meshes)

    def __getitem__(self, i):
        return self.meshes[i]

    def bone_meshes(self, bone: str) -> list:
        return [split_bones(self.base, m)[bone] for m in self.meshes]

    def truth_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "coefficients": self.coefficients.tolist(),
            "resamples": [list(r) for r in self.resamples],
            "mode_variances": [m.variance for m in self.spec.modes],
        }


def _folds(base: TriangleMesh, deformed: TriangleMesh) -> bool:
    n0 = face_normals(base, unit=False)
    n1 = face_normals(deformed, unit=False)
    return bool(np.any(np.sum(n0 * n1, axis=1) <= 0))


def instance(spec: PhantomSpec, coefficients, base: BasePhantom | None = None,
             fields: np.ndarray | None = None) -> TriangleMesh:
    """Base mesh deformed by ``sum_i c_i * field_i``."""
    base = base or base_phantom(spec)
    F = mode_fields(spec, base) if fields is None else fields
    c = np.asarray(coefficients, dtype=np.float64).reshape(-1)
    if len(c) != F.shape[1]:
        raise InputError(f"expected {F.shape[1]} coefficients, got {len(c)}")
    return base.mesh.with_vertices(base.mesh.vertices + (F @ c).reshape(-1, 3))


def generate_population(spec: PhantomSpec, count: int) -> Population:
    """``count`` corresponded meshes with coefficients ``c_i ~ N(0, variance_i)``.

    A draw whose deformation flips any face normal relative to the base is
    rejected and redrawn from the next RESAMPLE attempt of the same member.
    """
    if int(count) < 1:
        raise InputError("count must be ≥ 1")
    base = base_phantom(spec)
    F = mode_fields(spec, base)
    sd = np.sqrt(np.array([m.variance for m in spec.modes], dtype=np.float64))
    meshes, coeffs, resamples = [], [], []
    for i in range(int(count)):
        for attempt in range(MAX_RESAMPLES):
            rng = rng_for(spec.seed, STREAM_POPULATION, i, attempt)
            c = rng.standard_normal(len(sd)) * sd
            mesh = instance(spec, c, base, F)
            if not _folds(base.mesh, mesh):
                break
        else:
            raise InputError(f"member {i}: every draw folded the surface; variances too large")
        if attempt:
            resamples.append((i, attempt))
        meshes.append(mesh)
        coeffs.append(c)
    return Population(spec, base, F, meshes, np.array(coeffs).reshape(len(meshes), len(sd)), resamples)


# -- volumes -------------------------------------------------------------------

def grid_around(meshes, spacing: float = 1.0, margin: float = 8.0) -> GridSpec:
    V = np.vstack([m.vertices for m in meshes])
    return GridSpec.around(V.min(axis=0), V.max(axis=0), spacing, margin)


def synthesize_volume(meshes, grid: GridSpec, quality: str = "high", seed: int = 0,
                      index: int = 0) -> Volume3:
    """Voxelize bones (intensity 1000, capped), blur, then add Gaussian noise."""
    if quality not in QUALITY:
        raise InputError(f"quality must be one of {sorted(QUALITY)}")
    q = QUALITY[quality]
    acc = np.zeros(grid.dims)
    for m in meshes:
        acc += voxelize(m, grid, BONE_INTENSITY, 0.0, dtype=np.float64).data
    acc = np.minimum(acc, BONE_INTENSITY)
    vol = gaussian_blur(Volume3(acc, grid), q["blur_mm"])
    noise = rng_for(seed, STREAM_NOISE, index).standard_normal(grid.dims) * q["noise_sigma"]
    return Volume3((vol.data + noise).astype(np.float32), grid)


# -- fractures -----------------------------------------------------------------

@dataclass(frozen=True)
class FractureScenario:
    cut_height: float
    displacement: SimilarityTransform = field(default_factory=SimilarityTransform.identity)
    fragment: str = "distal"

    def __post_init__(self):
        if self.displacement.scale != 1.0:
            raise InputError("fracture displacement must be rigid")
        if self.fragment not in ("distal", "proximal"):
            raise InputError("fragment must be 'distal' or 'proximal'")


def _cap_boundary(V: list, F: list) -> None:
    """Close every boundary loop of a mesh with a fan around its centroid."""
    faces = np.asarray(F, dtype=np.int64)
    directed = set()
    for a, b, c in faces:
        directed.update(((a, b), (b, c), (c, a)))
    succ = {}
    for u, v in directed:
        if (v, u) not in directed:
            succ[u] = v
    seen = set()
    for start in sorted(succ):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        nxt = succ[start]
        while nxt != start:
            if nxt in seen or nxt not in succ:
                raise InputError("cut boundary is not a simple loop")
            loop.append(nxt)
            seen.add(nxt)
            nxt = succ[nxt]
        center = np.mean([V[i] for i in loop], axis=0)
        V.append(center)
        ci = len(V) - 1
        for i in range(len(loop)):
            a, b = loop[i], loop[(i + 1) % len(loop)]
            F.append((ci, b, a))


def _compact(V: list, F: list) -> TriangleMesh:
    faces = np.asarray(F, dtype=np.int64)
    used = np.unique(faces)
    remap = np.full(len(V), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(np.asarray(V)[used], remap[faces])


def cut_mesh(mesh: TriangleMesh, height: float) -> tuple[TriangleMesh, TriangleMesh]:
    """Split by the plane ``z = height``; returns closed (above, below) halves."""
    V = mesh.vertices
    d = V[:, 2] - height
    span = float(np.ptp(V[:, 2])) or 1.0
    if np.any(np.abs(d) < 1e-9 * span):
        # keep the plane off vertices so no zero-length edges appear
        d = d - 1e-6 * span
    above = d >= 0
    if above.all() or (~above).all():
        raise PlaneMisses(f"plane z = {height:g} does not intersect the mesh "
                          f"(z range {V[:, 2].min():g} .. {V[:, 2].max():g})")
    verts = [p for p in V]
    cache: dict[tuple[int, int], int] = {}

    def cross(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in cache:
            t = d[i] / (d[i] - d[j])
            verts.append(V[i] + t * (V[j] - V[i]))
            cache[key] = len(verts) - 1
        return cache[key]

    up, down = [], []
    for f in mesh.faces:
        s = above[f]
        if s.all():
            up.append(tuple(f))
            continue
        if not s.any():
            down.append(tuple(f))
            continue
        # rotate so the lone vertex comes first, keeping the winding
        lone_up = s.sum() == 1
        k = int(np.flatnonzero(s if lone_up else ~s)[0])
        a, b, c = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
        pab, pac = cross(a, b), cross(a, c)
        lone, rest = (up, down) if lone_up else (down, up)
        lone.append((a, pab, pac))
        rest += [(pab, b, c), (pab, c, pac)]
    vu, vd = list(verts), list(verts)
    _cap_boundary(vu, up)
    _cap_boundary(vd, down)
    return _compact(vu, up), _compact(vd, down)


def apply_fracture(bone: TriangleMesh, scenario: FractureScenario):
    """Cut ``bone`` and displace one fragment.

    Returns ``(proximal, distal, ground_truth)``; distal is the part below
    the cut plane and ``ground_truth`` is the displacement applied to the
    chosen fragment (its inverse is the reduction).
    """
    proximal, distal = cut_mesh(bone, scenario.cut_height)
    if scenario.fragment == "distal":
        distal = apply_transform(distal, scenario.displacement)
    else:
        proximal = apply_transform(proximal, scenario.displacement)
    return proximal, distal, scenario.displacement
