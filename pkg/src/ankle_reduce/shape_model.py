"""PCA point-distribution models built from corresponded training meshes.

A shape is the flattened vertex array ``x`` (length 3n, xyz interleaved)
and the model approximates it as ``x ~ mean + modes @ b``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptModel,
    InputError,
    InsufficientSamples,
    LengthMismatch,
    SchemaVersionMismatch,
    TopologyMismatch,
)
from .geometry import SimilarityTransform, TriangleMesh, compose
from .pointreg import umeyama_similarity

SCHEMA_VERSION = "1"


def centroid_size(points) -> float:
    p = np.asarray(points, dtype=np.float64)
    return float(np.sqrt(np.sum((p - p.mean(axis=0)) ** 2)))


@dataclass(frozen=True, eq=False)
class AlignedTrainingSet:
    shapes: list
    alignments: list
    mean_shape: TriangleMesh
    with_scale: bool
    centroid_size: float
    iterations: int
    converged: bool

    @property
    def n_shapes(self) -> int:
        return len(self.shapes)

    def data_matrix(self) -> np.ndarray:
        """(N, 3n) matrix of flattened aligned shapes."""
        return np.stack([s.vertices.ravel() for s in self.shapes])


def _check_topology(shapes):
    ref = shapes[0]
    for i, s in enumerate(shapes[1:], 1):
        if not ref.same_topology(s):
            raise TopologyMismatch(
                f"shape {i} has {s.n_vertices} vertices / {s.n_faces} faces, "
                f"expected the topology of shape 0 ({ref.n_vertices} / {ref.n_faces})"
            )


def generalized_procrustes(shapes, with_scale: bool = True, tol: float = 1e-9,
                           max_iters: int = 100) -> AlignedTrainingSet:
    """Iteratively align every shape to the running mean.

    The mean is kept centered at the origin. With ``with_scale`` the mean is
    normalized to unit centroid size during the iteration and the final set
    is rescaled by the average input centroid size, so coordinates (and
    model eigenvalues) stay in mm.
    """
    shapes = list(shapes)
    if len(shapes) < 2:
        raise InsufficientSamples("Procrustes alignment needs at least 2 shapes")
    _check_topology(shapes)
    X = [s.vertices for s in shapes]

    def normalize(m):
        m = m - m.mean(axis=0)
        return m / centroid_size(m) if with_scale else m

    # seed the consensus with the raw mean unless rotations cancel it out
    raw = np.mean([x - x.mean(axis=0) for x in X], axis=0)
    sizes = [centroid_size(x) for x in X]
    mean = normalize(raw if centroid_size(raw) > 0.25 * np.mean(sizes) else X[0])
    # movement is compared in mm even though the loop runs at unit size
    mm_per_unit = float(np.mean(sizes)) if with_scale else 1.0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        T = [umeyama_similarity(x, mean, with_scale=with_scale) for x in X]
        new_mean = normalize(np.mean([t.apply(x) for t, x in zip(T, X)], axis=0))
        moved = mm_per_unit * float(np.sqrt(np.mean(np.sum((new_mean - mean) ** 2, axis=1))))
        mean = new_mean
        if moved < tol:
            converged = True
            break

    T = [umeyama_similarity(x, mean, with_scale=with_scale) for x in X]
    if with_scale:
        # restore mm: the aligned shapes keep the average input centroid size
        size = mm_per_unit / float(np.mean([t.scale * s for t, s in zip(T, sizes)]))
        T = [compose(SimilarityTransform(scale=size), t) for t in T]
    aligned = [s.with_vertices(t.apply(s.vertices)) for t, s in zip(T, shapes)]
    mean_shape = shapes[0].with_vertices(np.mean([a.vertices for a in aligned], axis=0))
    return AlignedTrainingSet(aligned, T, mean_shape, with_scale, mm_per_unit, it, converged)


@dataclass(frozen=True)
class ModeRule:
    """How many modes to keep: a fixed count or a cumulative variance fraction."""

    kind: str
    value: float

    @classmethod
    def fixed(cls, t: int) -> "ModeRule":
        if int(t) < 1:
            raise InputError("fixed mode count must be >= 1")
        return cls("fixed", int(t))

    @classmethod
    def fraction(cls, f: float) -> "ModeRule":
        if not 0.0 < f <= 1.0:
            raise InputError("variance fraction must lie in (0, 1]")
        return cls("fraction", float(f))

    @classmethod
    def parse(cls, text: str) -> "ModeRule":
        """``"t=3"`` or ``"f=0.95"``."""
        key, _, val = str(text).partition("=")
        key = key.strip().lower()
        if key in ("t", "fixed"):
            return cls.fixed(int(val))
        if key in ("f", "fraction", "variance"):
            return cls.fraction(float(val))
        raise InputError(f"mode rule {text!r}: expected 't=<int>' or 'f=<fraction>'")


@dataclass(frozen=True, eq=False)
class ShapeModel:
    mean: np.ndarray
    modes: np.ndarray
    eigenvalues: np.ndarray
    faces: np.ndarray
    bone_name: str = "bone"
    procrustes: dict = field(default_factory=lambda: {"with_scale": True, "centroid_size": 1.0})
    total_variance: float | None = None

    def __post_init__(self):
        for name, dt in (("mean", np.float64), ("modes", np.float64), ("eigenvalues", np.float64),
                         ("faces", np.int64)):
            a = np.array(getattr(self, name), dtype=dt, copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.modes.ndim == 1:
            object.__setattr__(self, "modes", self.modes.reshape(len(self.mean), -1))

    @property
    def n_landmarks(self) -> int:
        return len(self.mean) // 3

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)

    def mean_mesh(self) -> TriangleMesh:
        return TriangleMesh(self.mean.reshape(-1, 3), self.faces)

    def validate(self, ortho_tol: float = 1e-8) -> None:
        """Raise CorruptModel unless every structural invariant holds."""
        n3 = len(self.mean)
        if n3 == 0 or n3 % 3:
            raise CorruptModel("mean length is not a positive multiple of 3")
        if self.modes.shape != (n3, len(self.eigenvalues)):
            raise CorruptModel(
                f"modes shape {self.modes.shape} does not match mean length {n3} "
                f"and {len(self.eigenvalues)} eigenvalues"
            )
        lam = self.eigenvalues
        if np.any(~np.isfinite(lam)) or np.any(lam < 0) or np.any(np.diff(lam) > 0):
            raise CorruptModel("eigenvalues must be finite, nonnegative and descending")
        G = self.modes.T @ self.modes
        if self.n_modes and np.max(np.abs(G - np.eye(self.n_modes))) > ortho_tol:
            raise CorruptModel("mode columns are not orthonormal")
        f = self.faces
        if f.ndim != 2 or f.shape[1] != 3 or (f.size and (f.min() < 0 or f.max() >= n3 // 3)):
            raise CorruptModel("faces are not valid index triples")


def build_model(aligned: AlignedTrainingSet, mode_rule: ModeRule | None = None,
                bone_name: str = "bone") -> ShapeModel:
    """PCA of the aligned shapes via the N x N Gram matrix.

    Covariance is normalized by N - 1. Each mode is sign-fixed so that its
    largest-magnitude entry is positive.
    """
    mode_rule = mode_rule or ModeRule.fraction(0.98)
    N = aligned.n_shapes
    if N < 2:
        raise InsufficientSamples("PCA needs at least 2 aligned shapes")
    X = aligned.data_matrix()
    mean = X.mean(axis=0)
    Xc = X - mean
    G = (Xc @ Xc.T) / (N - 1)
    w, V = np.linalg.eigh(G)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    total = float(np.trace(G))
    keep = w > max(1e-12 * max(w[0], 0.0), 1e-300)
    keep[N - 1:] = False
    w, V = w[keep], V[:, keep]
    if len(w) == 0:
        t = 0
    elif mode_rule.kind == "fixed":
        t = min(int(mode_rule.value), len(w))
    else:
        frac = np.cumsum(w) / w.sum()
        t = int(np.searchsorted(frac, mode_rule.value - 1e-12) + 1)
        t = min(t, len(w))
    w, V = w[:t], V[:, :t]
    P = Xc.T @ V / np.sqrt((N - 1) * w)
    # one Gram-Schmidt pass cleans up rounding from the small-eigenvalue tail
    P, Rq = np.linalg.qr(P)
    P = P * np.sign(np.diag(Rq))
    if t:
        big = np.argmax(np.abs(P), axis=0)
        P = P * np.sign(P[big, np.arange(t)])
    return ShapeModel(
        mean=mean,
        modes=P,
        eigenvalues=w,
        faces=aligned.shapes[0].faces,
        bone_name=bone_name,
        procrustes={"with_scale": aligned.with_scale, "centroid_size": aligned.centroid_size},
        total_variance=total,
    )


def synthesize(model: ShapeModel, coeffs) -> TriangleMesh:
    b = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    if len(b) != model.n_modes:
        raise LengthMismatch(f"expected {model.n_modes} coefficients, got {len(b)}")
    return TriangleMesh((model.mean + model.modes @ b).reshape(-1, 3), model.faces)


def project(model: ShapeModel, shape) -> tuple[np.ndarray, float]:
    """Coefficients of ``shape`` (already in the model frame) and the RMS residual.

    ``shape`` is a TriangleMesh with the model topology or an (n, 3) array.
    """
    if isinstance(shape, TriangleMesh):
        if shape.n_vertices != model.n_landmarks or not np.array_equal(shape.faces, model.faces):
            raise TopologyMismatch("shape topology does not match the model")
        x = shape.vertices.ravel()
    else:
        x = np.asarray(shape, dtype=np.float64).ravel()
        if len(x) != len(model.mean):
            raise TopologyMismatch(f"expected {model.n_landmarks} vertices")
    d = x - model.mean
    b = model.modes.T @ d
    r = d - model.modes @ b
    return b, float(np.sqrt(np.mean(r * r)))


def clamp_coefficients(model: ShapeModel, coeffs, k: float) -> np.ndarray:
    """Clip each coefficient to ``[-k sqrt(lambda_i), +k sqrt(lambda_i)]``."""
    if not k > 0:
        raise InputError("clamp multiplier k must be positive")
    lim = k * model.sd
    return np.clip(np.asarray(coeffs, dtype=np.float64), -lim, lim)


def reconstruction_rms(model: ShapeModel, shape, t: int) -> float:
    """RMS error of reconstructing ``shape`` from the first ``t`` modes."""
    x = shape.vertices.ravel() if isinstance(shape, TriangleMesh) else np.ravel(shape)
    P = model.modes[:, :t]
    d = x - model.mean
    r = d - P @ (P.T @ d)
    return float(np.sqrt(np.mean(r * r)))


# -- persistence ---------------------------------------------------------------

def model_to_dict(model: ShapeModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "bone_name": model.bone_name,
        "n_landmarks": model.n_landmarks,
        "n_modes": model.n_modes,
        "mean": model.mean.tolist(),
        "modes": model.modes.T.tolist(),
        "eigenvalues": model.eigenvalues.tolist(),
        "faces": model.faces.tolist(),
        "procrustes": {
            "with_scale": bool(model.procrustes.get("with_scale", True)),
            "centroid_size": float(model.procrustes.get("centroid_size", 1.0)),
        },
        "total_variance": model.total_variance,
    }


def model_from_dict(d: dict) -> ShapeModel:
    if not isinstance(d, dict):
        raise CorruptModel("model file is not a JSON object")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"schema_version {version!r}, expected {SCHEMA_VERSION!r}")
    try:
        n = int(d["n_landmarks"])
        t = int(d["n_modes"])
        mean = np.asarray(d["mean"], dtype=np.float64)
        modes_cols = d["modes"]
        lam = np.asarray(d["eigenvalues"], dtype=np.float64)
        faces = np.asarray(d["faces"], dtype=np.int64).reshape(-1, 3)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModel(f"model file is missing or has malformed fields: {exc}") from exc
    if len(lam) != t:
        raise CorruptModel(f"n_modes = {t} but {len(lam)} eigenvalues")
    if len(modes_cols) != t:
        raise CorruptModel(f"n_modes = {t} but {len(modes_cols)} mode columns")
    if len(mean) != 3 * n:
        raise CorruptModel(f"n_landmarks = {n} but mean has length {len(mean)}")
    modes = np.asarray(modes_cols, dtype=np.float64).reshape(t, -1).T if t else np.zeros((3 * n, 0))
    if modes.shape != (3 * n, t):
        raise CorruptModel("mode columns must each have length 3 * n_landmarks")
    model = ShapeModel(
        mean=mean, modes=modes, eigenvalues=lam, faces=faces,
        bone_name=str(d.get("bone_name", "bone")),
        procrustes=dict(d.get("procrustes", {"with_scale": True, "centroid_size": 1.0})),
        total_variance=d.get("total_variance"),
    )
    model.validate()
    return model


def save_model(model: ShapeModel, path) -> None:
    # json writes floats with repr(): the shortest string that round-trips (<= 17 digits)
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_model(path) -> ShapeModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CorruptModel(f"{path}: invalid JSON ({exc})") from exc
    return model_from_dict(d)
