"""Reduction planning: register the injured fibula onto the mirrored healthy one.

The plan's transform moves the injured bone (or fragment) from its current
position to the mirror image of the contralateral side. It is always rigid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InputError, NotRigid
from .geometry import (
    MirrorPlane,
    SimilarityTransform,
    SurfaceDistanceStats,
    TriangleMesh,
    apply_transform,
    mirror,
    surface_distance,
)
from .pointreg import cpd_rigid, icp_rigid

DEFAULT_TOLERANCE_MM = 2.0
BACKENDS = ("cpd", "icp")


def decompose_transform(t: SimilarityTransform):
    """``(translation_mm, rotation_axis, rotation_deg)`` of a rigid transform.

    The angle lies in [0, 180]. The identity rotation gets axis (0, 0, 1);
    for a half turn, where axis and its negation are equivalent, the axis
    is signed so that its largest-magnitude component is positive.
    """
    if abs(t.scale - 1.0) > 1e-9:
        raise NotRigid(f"transform has scale {t.scale!r}; a reduction must be rigid")
    rv = Rotation.from_matrix(t.rotation).as_rotvec()
    angle = float(np.linalg.norm(rv))
    if angle == 0.0:
        axis = np.array([0.0, 0.0, 1.0])
    else:
        axis = rv / angle
        if np.pi - angle < 1e-9:
            axis = axis * np.sign(axis[np.argmax(np.abs(axis))])
    return np.array(t.translation, dtype=np.float64), axis, float(np.degrees(angle))


@dataclass(frozen=True, eq=False)
class ReductionPlan:
    transform: SimilarityTransform
    translation_mm: np.ndarray
    rotation_axis: np.ndarray
    rotation_deg: float
    residual: SurfaceDistanceStats
    within_tolerance: bool
    tolerance_mm: float = DEFAULT_TOLERANCE_MM
    registration: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "matrix": self.transform.matrix.tolist(),
            "translation_mm": np.asarray(self.translation_mm).tolist(),
            "rotation_axis": np.asarray(self.rotation_axis).tolist(),
            "rotation_deg": self.rotation_deg,
            "residual": self.residual.to_dict(),
            "within_tolerance": bool(self.within_tolerance),
            "tolerance_mm": self.tolerance_mm,
            "registration": dict(self.registration),
            "provenance": dict(self.provenance),
        }

    def with_provenance(self, **items) -> "ReductionPlan":
        prov = dict(self.provenance)
        prov.update(items)
        return ReductionPlan(self.transform, self.translation_mm, self.rotation_axis, self.rotation_deg,
                             self.residual, self.within_tolerance, self.tolerance_mm, self.registration,
                             prov)

    def summary(self) -> str:
        t = self.translation_mm
        a = self.rotation_axis
        return (f"translate ({t[0]:+.2f}, {t[1]:+.2f}, {t[2]:+.2f}) mm, rotate {self.rotation_deg:.2f} deg "
                f"about ({a[0]:+.3f}, {a[1]:+.3f}, {a[2]:+.3f}); residual mean {self.residual.mean:.3f} mm, "
                f"max {self.residual.max:.3f} mm; "
                f"{'within' if self.within_tolerance else 'OUT OF'} tolerance {self.tolerance_mm:g} mm")


def plan_reduction(injured: TriangleMesh, healthy: TriangleMesh, plane: MirrorPlane | None = None,
                   registration: str = "cpd", tolerance_mm: float = DEFAULT_TOLERANCE_MM,
                   outlier_w: float = 0.0, max_iters: int = 300) -> ReductionPlan:
    """Rigidly register ``injured`` onto ``mirror(healthy, plane)``.

    Scale is never estimated: a reduction repositions bone, it cannot
    resize it. The residual is the symmetric surface distance between the
    moved injured mesh and the mirrored template.
    """
    if registration not in BACKENDS:
        raise InputError(f"registration must be one of {BACKENDS}, got {registration!r}")
    injured.require_nonempty()
    healthy.require_nonempty()
    plane = plane or MirrorPlane()
    template = mirror(healthy, plane)
    src, dst = injured.vertices, template.vertices
    if registration == "cpd":
        rep = cpd_rigid(src, dst, with_scale=False, outlier_w=outlier_w, tol=1e-10, max_iters=max_iters)
    else:
        init = SimilarityTransform(translation=dst.mean(axis=0) - src.mean(axis=0))
        rep = icp_rigid(src, dst, init=init, max_iters=max_iters)
    T = SimilarityTransform(rep.transform.rotation, rep.transform.translation, 1.0)
    residual = surface_distance(apply_transform(injured, T), template, symmetric=True)
    trans, axis, deg = decompose_transform(T)
    return ReductionPlan(
        transform=T,
        translation_mm=trans,
        rotation_axis=axis,
        rotation_deg=deg,
        residual=residual,
        within_tolerance=bool(residual.mean <= tolerance_mm),
        tolerance_mm=float(tolerance_mm),
        registration={"backend": registration, "iterations": rep.iterations, "converged": rep.converged,
                      "rms_residual": rep.rms_residual},
    )


@dataclass(frozen=True)
class PlanCheck:
    passed: bool
    reasons: tuple = ()

    def __bool__(self):
        return self.passed


def validate_plan(plan: ReductionPlan, tolerance_mm: float = DEFAULT_TOLERANCE_MM) -> PlanCheck:
    """Check mean residual, the Hausdorff cap (2 x tolerance) and finiteness."""
    reasons = []
    values = np.concatenate([plan.transform.matrix.ravel(), np.ravel(plan.translation_mm),
                             np.ravel(plan.rotation_axis), [plan.rotation_deg, plan.residual.mean,
                                                            plan.residual.rms, plan.residual.max]])
    if not np.all(np.isfinite(values)):
        reasons.append("non-finite values")
    if not plan.residual.mean <= tolerance_mm:
        reasons.append(f"mean residual {plan.residual.mean:.3f} mm exceeds {tolerance_mm:g} mm")
    if not plan.residual.max <= 2.0 * tolerance_mm:
        reasons.append(f"Hausdorff cap: max residual {plan.residual.max:.3f} mm exceeds "
                       f"{2.0 * tolerance_mm:g} mm")
    return PlanCheck(not reasons, tuple(reasons))


def save_plan(plan: ReductionPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2) + "\n")
