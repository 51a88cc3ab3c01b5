"""Coupled active shape model fitting on gradient-magnitude volumes.

World-frame mesh of a bone = ``pose.apply(synthesize(model, b))``. Each
iteration searches the gradient along vertex normals, refits pose and
shape coefficients to the found edges, then pushes apart bones that come
closer than their configured joint gap.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import (
    AnkleReduceError,
    InputError,
    InsufficientEdges,
    TooFewTargets,
)
from .geometry import (
    SimilarityTransform,
    TriangleMesh,
    closest_points,
    compose,
    face_normals,
    inside_mesh,
    invert,
    vertex_normals,
)
from .pointreg import PointCloud, cpd_rigid, umeyama_similarity
from .shape_model import ShapeModel, clamp_coefficients, load_model, project, synthesize
from .volume import Volume3, gaussian_blur, gradient_magnitude, sample_trilinear

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    profile_half_length: float = 6.0
    profile_step: float = 0.5
    gradient_threshold_percentile: float = 80.0
    clamp_k: float = 3.0
    max_iters: int = 50
    convergence_tol: float = 0.05
    blur_sigma: float = 1.0
    min_edge_points: int = 500
    max_edge_points: int = 4000
    init_outlier_w: float = 0.1
    init_tol: float = 1e-7
    init_max_vertices: int = 700
    proximity_strength: float = 0.5
    min_targeted_fraction: float = 0.25

    def __post_init__(self):
        if not self.profile_step > 0:
            raise InputError("profile_step must be > 0")
        if not self.profile_half_length >= self.profile_step:
            raise InputError("profile_half_length must be >= profile_step")
        if not 0 < self.gradient_threshold_percentile < 100:
            raise InputError("gradient_threshold_percentile must lie in (0, 100)")
        if not self.clamp_k > 0:
            raise InputError("clamp_k must be > 0")
        if int(self.max_iters) < 1:
            raise InputError("max_iters must be >= 1")
        if not 0 <= self.proximity_strength <= 1:
            raise InputError("proximity_strength must lie in [0, 1]")

    @property
    def offsets(self) -> np.ndarray:
        """Profile offsets in tie-break priority order: 0, -s, +s, -2s, +2s, ..."""
        k = int(np.floor(self.profile_half_length / self.profile_step + 1e-9))
        out = [0.0]
        for i in range(1, k + 1):
            out += [-i * self.profile_step, i * self.profile_step]
        return np.array(out)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise InputError(f"unknown fit config fields: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class ProximityConstraint:
    bone_a: str
    bone_b: str
    min_gap: float

    def __post_init__(self):
        if self.bone_a == self.bone_b:
            raise InputError("a proximity constraint needs two different bones")
        if not self.min_gap >= 0:
            raise InputError("min_gap must be >= 0")


@dataclass(frozen=True, eq=False)
class CoupledModelSet:
    models: dict
    constraints: tuple = ()
    rest_offsets: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.models:
            raise InputError("a model set needs at least one model")
        object.__setattr__(self, "constraints", tuple(self.constraints))
        offs = {b: self.rest_offsets.get(b, SimilarityTransform.identity()) for b in self.models}
        object.__setattr__(self, "rest_offsets", offs)
        for c in self.constraints:
            for b in (c.bone_a, c.bone_b):
                if b not in self.models:
                    raise InputError(f"constraint references unknown bone {b!r}")

    @property
    def bones(self) -> list:
        return list(self.models)

    def rest_meshes(self) -> dict:
        return {b: self.models[b].mean_mesh().with_vertices(
            self.rest_offsets[b].apply(self.models[b].mean_mesh().vertices)) for b in self.models}

    def rest_violations(self) -> list:
        """Constraints the rest configuration itself breaks (should be empty)."""
        rest = self.rest_meshes()
        return [c for c in self.constraints
                if min_signed_gap(rest[c.bone_a], rest[c.bone_b]) < c.min_gap - 1e-9]

    def to_dict(self, model_paths: dict) -> dict:
        return {
            "models": {b: str(model_paths[b]) for b in self.models},
            "constraints": [asdict(c) for c in self.constraints],
            "rest_offsets": {b: t.to_dict() for b, t in self.rest_offsets.items()},
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "CoupledModelSet":
        base = Path(base_dir) if base_dir is not None else Path(".")
        try:
            models = {}
            for bone, p in d["models"].items():
                path = Path(p)
                models[bone] = load_model(path if path.is_absolute() else base / path)
            cons = [ProximityConstraint(**c) for c in d.get("constraints", [])]
            offs = {b: SimilarityTransform.from_dict(t) for b, t in d.get("rest_offsets", {}).items()}
        except (KeyError, TypeError, AttributeError) as exc:
            raise InputError(f"malformed model set: {exc}") from exc
        except OSError as exc:
            raise InputError(f"cannot read model: {exc}") from exc
        return cls(models, cons, offs)

    @classmethod
    def load(cls, path) -> "CoupledModelSet":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: cannot read model set ({exc})") from exc
        return cls.from_dict(d, path.parent)


@dataclass(frozen=True, eq=False)
class BoneFit:
    mesh: TriangleMesh | None
    pose: SimilarityTransform
    coeffs: np.ndarray
    residual: float
    targeted_fraction: float
    failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "pose": {"matrix": self.pose.matrix.tolist(), "scale": self.pose.scale},
            "coeffs": np.asarray(self.coeffs).tolist(),
            "residual": self.residual,
            "targeted_fraction": self.targeted_fraction,
            "failed": self.failed,
            "error": self.error,
        }


@dataclass(frozen=True, eq=False)
class FitResult:
    bones: dict
    iterations: int
    converged: bool
    movement: list

    @property
    def failed(self) -> list:
        return [b for b, f in self.bones.items() if f.failed]

    def to_dict(self) -> dict:
        return {
            "bones": {b: f.to_dict() for b, f in self.bones.items()},
            "iterations": self.iterations,
            "converged": self.converged,
            "movement": list(self.movement),
        }


# -- building blocks -------------------------------------------------------------

def gradient_threshold(grad: Volume3, percentile: float) -> float:
    return float(np.percentile(grad.data, percentile))


def _block_reduce(ijk: np.ndarray, w: np.ndarray, block: int):
    """Weighted centroid and total weight of the points in each ``block``^3 cell."""
    key = ijk.astype(np.int64) // block
    _, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    W = np.bincount(inv, w)
    C = np.stack([np.bincount(inv, w * ijk[:, a]) for a in range(3)], axis=1) / W[:, None]
    return C, W


def edge_cloud(grad: Volume3, config: FitConfig, threshold: float | None = None) -> PointCloud:
    """World positions of above-threshold voxels, weighted by gradient magnitude.

    Large clouds are reduced by merging voxels in cubic blocks (the
    smallest block size that meets ``max_edge_points``) rather than by
    striding, which aliases with the grid and biases the registration.
    """
    thr = gradient_threshold(grad, config.gradient_threshold_percentile) if threshold is None else threshold
    flat = grad.flat()
    idx = np.flatnonzero(flat > thr)
    if len(idx) < config.min_edge_points:
        raise InsufficientEdges(
            f"{len(idx)} voxels above the {config.gradient_threshold_percentile:g}th gradient "
            f"percentile; need at least {config.min_edge_points}"
        )
    ijk = np.stack(np.unravel_index(idx, grad.dims, order="F"), axis=1).astype(np.float64)
    w = flat[idx].astype(np.float64)
    block = 1
    while len(ijk) > config.max_edge_points:
        block += 1
        ijk0 = np.stack(np.unravel_index(idx, grad.dims, order="F"), axis=1).astype(np.float64)
        ijk, w = _block_reduce(ijk0, flat[idx].astype(np.float64), block)
    return PointCloud(grad.grid.index_to_world(ijk), w)


def coarse_initialize(mean_mesh: TriangleMesh, grad: Volume3, config: FitConfig | None = None,
                      threshold: float | None = None) -> SimilarityTransform:
    """Scaled CPD of the mesh vertices onto the gradient edge cloud; mesh -> world."""
    config = config or FitConfig()
    cloud = edge_cloud(grad, config, threshold)
    src = mean_mesh.vertices
    if len(src) > config.init_max_vertices:
        src = src[::int(np.ceil(len(src) / config.init_max_vertices))]
    rep = cpd_rigid(src, cloud, with_scale=True, outlier_w=config.init_outlier_w,
                    tol=config.init_tol)
    log.debug("coarse init: %d CPD iterations, sigma^2 %.4g", rep.iterations, rep.sigma2)
    return rep.transform


def profile_search(mesh: TriangleMesh, grad: Volume3, config: FitConfig | None = None,
                   threshold: float | None = None):
    """Best edge along each vertex normal.

    Returns ``(targeted, targets)``: a boolean mask over vertices and an
    (n, 3) array of targets (rows of untargeted vertices are NaN). Ties go
    to the smaller ``|offset|``, then to the inward side.
    """
    config = config or FitConfig()
    thr = gradient_threshold(grad, config.gradient_threshold_percentile) if threshold is None else threshold
    V = mesh.vertices
    N = vertex_normals(mesh)
    off = config.offsets
    pts = V[:, None, :] + off[None, :, None] * N[:, None, :]
    g = sample_trilinear(grad, pts.reshape(-1, 3)).reshape(len(V), len(off))
    best = np.argmax(g, axis=1)  # first maximum in priority order
    gbest = g[np.arange(len(V)), best]
    targeted = gbest > thr
    targets = np.full_like(V, np.nan)
    targets[targeted] = pts[np.flatnonzero(targeted), best[targeted]]
    return targeted, targets


def constrain_to_model(model: ShapeModel, current_pose: SimilarityTransform, targeted, targets,
                       clamp_k: float, current_coeffs=None, max_inner: int = 100,
                       tol: float = 1e-12):
    """Pose and clamped shape coefficients that best explain the targets.

    Alternates a similarity fit of the current model-frame shape to the
    targeted points with a clamped projection of the pulled-back targets;
    untargeted vertices keep their current model-frame positions. Each
    half-step is exact, so the alternation descends monotonically.
    """
    targeted = np.asarray(targeted, dtype=bool)
    idx = np.flatnonzero(targeted)
    if len(idx) < 4:
        raise TooFewTargets(f"{len(idx)} targeted vertices; need at least 4")
    tgt = np.asarray(targets, dtype=np.float64)[idx]
    c = tgt - tgt.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    if sv[2] <= 1e-9 * sv[0]:
        raise TooFewTargets("targeted points are coplanar")
    b = np.zeros(model.n_modes) if current_coeffs is None else np.asarray(current_coeffs, dtype=np.float64)
    y_fill = synthesize(model, b).vertices
    pose = current_pose
    for _ in range(max_inner):
        y = synthesize(model, b).vertices
        pose = umeyama_similarity(y[idx], tgt, with_scale=True)
        x = y_fill.copy()
        x[idx] = invert(pose).apply(tgt)
        b_new, _ = project(model, x)
        b_new = clamp_coefficients(model, b_new, clamp_k)
        step = float(np.max(np.abs(b_new - b))) if len(b) else 0.0
        b = b_new
        if step < tol:
            break
    y = synthesize(model, b).vertices
    pose = umeyama_similarity(y[idx], tgt, with_scale=True)
    return pose, b


def signed_gaps(points, mesh: TriangleMesh):
    """Closest-point distance to ``mesh``, negative inside; also the closest points."""
    cp = closest_points(points, mesh)
    inside = inside_mesh(points, mesh)
    return np.where(inside, -cp.distance, cp.distance), cp


def min_signed_gap(a: TriangleMesh, b: TriangleMesh) -> float:
    da, _ = signed_gaps(a.vertices, b)
    db, _ = signed_gaps(b.vertices, a)
    return float(min(da.min(), db.min()))


def _push(points, other: TriangleMesh, min_gap: float, strength: float) -> np.ndarray:
    d, cp = signed_gaps(points, other)
    disp = np.zeros_like(points)
    close = np.flatnonzero(d < min_gap)
    if not len(close):
        return disp
    v = points[close] - cp.point[close]
    n = np.linalg.norm(v, axis=1)
    fn = face_normals(other)[cp.triangle[close]]
    # outward from the partner surface; fall back to its face normal on contact
    u = np.where(n[:, None] > 1e-9, v / np.maximum(n, 1e-300)[:, None], fn)
    u = np.where((d[close] < 0)[:, None] & (n[:, None] > 1e-9), -u, u)
    disp[close] = u * (strength * (min_gap - d[close]))[:, None]
    return disp


def enforce_proximity(meshes: dict, constraints, strength: float = 1.0) -> dict:
    """One projection pass pushing constrained pairs apart to ``min_gap``.

    Every vertex closer than ``min_gap`` to the partner surface (negative
    inside) moves outward along the closest-point direction by
    ``strength * (min_gap - d)``, for both bones of the pair. Displacements
    are computed from the input meshes and applied together.
    """
    constraints = list(constraints)
    if not constraints:
        return dict(meshes)
    disp = {b: np.zeros_like(m.vertices) for b, m in meshes.items()}
    for c in constraints:
        a, b = meshes[c.bone_a], meshes[c.bone_b]
        disp[c.bone_a] += _push(a.vertices, b, c.min_gap, strength)
        disp[c.bone_b] += _push(b.vertices, a, c.min_gap, strength)
    return {k: m.with_vertices(m.vertices + disp[k]) if np.any(disp[k]) else m for k, m in meshes.items()}


def _violated(meshes, constraints, slack=0.0) -> bool:
    return any(min_signed_gap(meshes[c.bone_a], meshes[c.bone_b]) < c.min_gap - slack for c in constraints)


# -- full fit ---------------------------------------------------------------------

def edge_residual(mask, targets, mesh: TriangleMesh) -> float:
    """RMS distance from targeted vertices to the edges found for them."""
    if not np.any(mask):
        return float("nan")
    d = targets[mask] - mesh.vertices[mask]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def fit_coupled(models: CoupledModelSet, volume: Volume3, config: FitConfig | None = None,
                final_proximity_passes: int = 20) -> FitResult:
    """Blur, take gradients, jointly initialize, then iterate the cASM loop.

    A bone's residual is the edge residual of its mesh: the RMS offset to
    the edges a fresh profile search finds from it. The returned state is
    the iterate with the smallest residual summed over bones, so raising
    ``max_iters`` can only lower it.
    """
    config = config or FitConfig()
    grad = gradient_magnitude(gaussian_blur(volume, config.blur_sigma))
    thr = gradient_threshold(grad, config.gradient_threshold_percentile)
    bones = models.bones
    rest = models.rest_meshes()
    union = TriangleMesh(np.vstack([rest[b].vertices for b in bones]),
                         np.vstack([rest[b].faces + sum(rest[p].n_vertices for p in bones[:i])
                                    for i, b in enumerate(bones)]))
    try:
        joint = coarse_initialize(union, grad, config, thr)
    except InsufficientEdges as exc:
        fails = {b: BoneFit(None, SimilarityTransform.identity(), np.zeros(models.models[b].n_modes),
                            float("nan"), 0.0, True, f"InsufficientEdges: {exc}") for b in bones}
        return FitResult(fails, 0, False, [])

    pose = {b: compose(joint, models.rest_offsets[b]) for b in bones}
    coef = {b: np.zeros(models.models[b].n_modes) for b in bones}
    current = {b: rest[b].with_vertices(pose[b].apply(models.models[b].mean.reshape(-1, 3)))
               for b in bones}
    errors: dict = {}
    movement = []
    best = None  # (score, iteration, state)
    converged = False
    it = 0

    def search(b):
        mask, targets = profile_search(current[b], grad, config, thr)
        frac = float(mask.mean())
        if frac < config.min_targeted_fraction:
            raise TooFewTargets(f"targeted fraction {frac:.3f} below {config.min_targeted_fraction:g}")
        return mask, targets, frac

    def consider(found, iteration):
        nonlocal best
        ok = [b for b in bones if b not in errors]
        if not ok:
            return
        score = sum(edge_residual(found[b][0], found[b][1], current[b]) for b in ok)
        if best is None or score < best[0]:
            state = {b: (current[b], pose[b], coef[b],
                         edge_residual(found[b][0], found[b][1], current[b]) if b in found else float("nan"),
                         found[b][2] if b in found else 0.0) for b in bones}
            best = (score, iteration, state)

    def search_all():
        found = {}
        for b in bones:
            if b in errors:
                continue
            try:
                found[b] = search(b)
            except AnkleReduceError as exc:
                log.warning("bone %s failed: %s", b, exc)
                errors[b] = f"{type(exc).__name__}: {exc}"
        return found

    found = search_all()
    for it in range(1, int(config.max_iters) + 1):
        proposed = {}
        for b in bones:
            proposed[b] = current[b]
            if b not in found:
                continue
            mask, targets, _ = found[b]
            try:
                pose[b], coef[b] = constrain_to_model(models.models[b], pose[b], mask, targets,
                                                      config.clamp_k, coef[b])
            except AnkleReduceError as exc:
                log.warning("bone %s failed: %s", b, exc)
                errors[b] = f"{type(exc).__name__}: {exc}"
                continue
            fitted = pose[b].apply(synthesize(models.models[b], coef[b]).vertices)
            proposed[b] = current[b].with_vertices(fitted)
        active = [c for c in models.constraints if c.bone_a not in errors and c.bone_b not in errors]
        proposed = enforce_proximity(proposed, active, config.proximity_strength)
        moved = float(np.mean(np.concatenate(
            [np.linalg.norm(proposed[b].vertices - current[b].vertices, axis=1) for b in bones])))
        movement.append(moved)
        current = proposed
        log.debug("iteration %d: mean movement %.4f mm", it, moved)
        found = search_all()
        consider(found, it)
        if moved < config.convergence_tol:
            converged = True
            break

    if best is not None:
        state = best[2]
        current = {b: state[b][0] for b in bones}
        pose = {b: state[b][1] for b in bones}
        coef = {b: state[b][2] for b in bones}
        resid = {b: state[b][3] for b in bones}
        frac = {b: state[b][4] for b in bones}
    else:
        resid = {b: float("nan") for b in bones}
        frac = {b: 0.0 for b in bones}

    active = [c for c in models.constraints if c.bone_a not in errors and c.bone_b not in errors]
    if config.proximity_strength > 0 and active:
        # both bones move, so half strength closes the gap without overshooting
        for _ in range(final_proximity_passes):
            if not _violated(current, active):
                break
            current = enforce_proximity(current, active, 0.5)
        for b in bones:
            if b not in errors:
                mask, targets = profile_search(current[b], grad, config, thr)
                resid[b] = edge_residual(mask, targets, current[b])
                frac[b] = float(mask.mean())

    out = {}
    for b in bones:
        out[b] = BoneFit(current[b], pose[b], coef[b], resid[b], frac[b], b in errors, errors.get(b))
    return FitResult(out, it, converged, movement)


def save_fit_config(config: FitConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
