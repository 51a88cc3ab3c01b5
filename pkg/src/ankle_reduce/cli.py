"""``ankle-reduce``: phantom generation through reduction planning.

Each subcommand writes JSON for machines and prints a short text summary.
Every report carries a ``provenance`` block with the tool version, the seed
and a SHA-256 of the effective pipeline configuration. Nothing time-dependent
is recorded, so identical inputs give byte-identical outputs.

Exit codes: 0 success, 1 computation failure, 2 usage or input error,
3 computed but out of tolerance.
"""
from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .casm_fit import CoupledModelSet, FitConfig, fit_coupled
from .errors import AnkleReduceError, ComputationError, InputError
from .geometry import (
    MirrorPlane,
    SimilarityTransform,
    TriangleMesh,
    apply_transform,
    compose,
    mirror,
    read_obj,
    rotation_about,
    rotation_angle_deg,
    surface_distance,
    write_obj,
)
from .phantom import (
    FractureScenario,
    PhantomSpec,
    Population,
    apply_fracture,
    cut_mesh,
    generate_population,
    grid_around,
    split_bones,
    synthesize_volume,
)
from .parallel import set_workers
from .reduction import BACKENDS, plan_reduction, validate_plan
from .shape_model import ModeRule, ShapeModel, build_model, generalized_procrustes, load_model, save_model
from .volume import read_nifti, write_nifti

log = logging.getLogger("ankle_reduce")

EXIT_OK = 0
EXIT_COMPUTATION = 1
EXIT_INPUT = 2
EXIT_TOLERANCE = 3

THREADS_ENV = "ANKLE_REDUCE_THREADS"
U64_MAX = 2 ** 64 - 1

# mm-scale variances (per unit-norm 3n field) so the modes stand out of the
# edge-localization error of a 1 mm grid
DEFAULT_PHANTOM = {
    "base_shape": "tube",
    "n_landmarks": 642,
    "modes": [
        {"field": "bulge", "variance": 225.0, "params": {}},
        {"field": "bend", "variance": 400.0, "params": {}},
        {"field": "taper", "variance": 100.0, "params": {}},
    ],
}

# The phantom tube narrows to ~4 mm at its waists; a 6 mm profile reaches the
# opposite wall there, so pipelines search +-3 mm. Config "fit" entries are
# merged over these.
PIPELINE_FIT = {"profile_half_length": 3.0}

DEFAULT_FRACTURE = {
    "cut_height": -8.0,
    "translation_mm": [3.0, 0.0, 4.0],
    "rotation_axis": [1.0, 1.0, 0.3],
    "rotation_deg": 8.0,
}

PATH_KEYS = ("models", "volumes", "meshes", "output")


# -- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run depends on besides its positional inputs.

    ``paths`` supplies defaults for omitted arguments: ``models`` (model or
    model set JSON), ``volumes`` (NIfTI volume), ``meshes`` (training mesh
    glob) and ``output`` (output directory). The phantom, fracture and
    placement fields are only read by ``run-all``.
    """

    seed: int = 0
    paths: dict = field(default_factory=dict)
    fit: FitConfig = field(default_factory=lambda: FitConfig.from_dict(PIPELINE_FIT))
    registration: str = "cpd"
    tolerance_mm: float = 2.0
    mirror_plane: dict = field(default_factory=lambda: {"point": [0.0, 0.0, 0.0], "normal": [1.0, 0.0, 0.0]})
    quality: str = "high"
    voxel_mm: float = 1.0
    margin_mm: float = 8.0
    phantom: dict = field(default_factory=lambda: dict(DEFAULT_PHANTOM))
    training_count: int = 20
    mode_rule: str = "f=0.98"
    healthy_offset_mm: tuple = (30.0, 0.0, 0.0)
    fracture: dict = field(default_factory=lambda: dict(DEFAULT_FRACTURE))
    template: str = "segmented"

    def __post_init__(self):
        if not 0 <= int(self.seed) <= U64_MAX:
            raise InputError("seed must be an unsigned 64-bit integer")
        unknown = set(self.paths) - set(PATH_KEYS)
        if unknown:
            raise InputError(f"unknown paths entries: {sorted(unknown)}; expected {list(PATH_KEYS)}")
        if self.registration not in BACKENDS:
            raise InputError(f"registration must be one of {BACKENDS}")
        if not self.tolerance_mm > 0:
            raise InputError("tolerance_mm must be > 0")
        if self.template not in ("segmented", "truth"):
            raise InputError("template must be 'segmented' or 'truth'")
        if int(self.training_count) < 2:
            raise InputError("training_count must be >= 2")
        if len(self.healthy_offset_mm) != 3:
            raise InputError("healthy_offset_mm must have three entries")
        missing = {"cut_height", "translation_mm", "rotation_axis", "rotation_deg"} - set(self.fracture)
        if missing:
            raise InputError(f"fracture is missing {sorted(missing)}")
        ModeRule.parse(self.mode_rule)
        self.plane()
        self.phantom_spec()

    def plane(self) -> MirrorPlane:
        return MirrorPlane(self.mirror_plane.get("point", [0, 0, 0]), self.mirror_plane.get("normal", [1, 0, 0]))

    def phantom_spec(self) -> PhantomSpec:
        d = dict(self.phantom)
        d["seed"] = int(self.seed)
        try:
            return PhantomSpec.from_dict(d)
        except TypeError as exc:
            raise InputError(f"phantom: {exc}") from exc

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["fit"] = self.fit.to_dict()
        d["healthy_offset_mm"] = [float(x) for x in self.healthy_offset_mm]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise InputError("pipeline config must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InputError(f"unknown config fields: {sorted(extra)}")
        d = dict(d)
        if "fit" in d:
            if not isinstance(d["fit"], dict):
                raise InputError("config fit must be a JSON object")
            d["fit"] = FitConfig.from_dict({**PIPELINE_FIT, **d["fit"]})
        if "healthy_offset_mm" in d:
            d["healthy_offset_mm"] = tuple(d["healthy_offset_mm"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InputError(f"config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: cannot read config ({exc})") from exc
        return cls.from_dict(d)

    def digest(self) -> str:
        text = json.dumps(_plain(self.to_dict()), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


# -- output helpers --------------------------------------------------------------

def _plain(obj):
    """JSON-ready copy: numpy to builtins, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), indent=2, ensure_ascii=False) + "\n")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Per-invocation context: effective config, seed, output and printing."""

    def __init__(self, command: str, args, config: PipelineConfig):
        self.command = command
        self.config = config
        self.quiet = bool(getattr(args, "quiet", False))
        self.seed = int(config.seed)

    def say(self, message: str) -> None:
        if not self.quiet:
            print(message)

    def provenance(self, **extra) -> dict:
        d = {
            "tool": "ankle-reduce",
            "version": __version__,
            "command": self.command,
            "config_sha256": self.config.digest(),
            "seed": self.seed,
        }
        d.update(extra)
        return d


def _out_dir(args, run: Run) -> Path:
    out = args.out or run.config.paths.get("output")
    if not out:
        raise InputError("no output directory: pass --out or set paths.output in the config")
    return Path(out)


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _stats(fitted: TriangleMesh, truth: TriangleMesh) -> dict:
    one = surface_distance(fitted, truth)
    sym = surface_distance(fitted, truth, symmetric=True)
    return {
        "fitted_to_truth": {"mean": one.mean, "rms": one.rms, "max": one.max},
        "symmetric": {"mean": sym.mean, "rms": sym.rms, "hausdorff": sym.max},
    }


def _table(header, rows) -> str:
    cells = [list(header)] + [[r[0]] + [f"{x:.4f}" if isinstance(x, float) else str(x) for x in r[1:]]
                              for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for row in cells:
        parts = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(parts).rstrip())
    return "\n".join(lines)


def _metrics_table(metrics: dict) -> str:
    rows = [[bone, m["fitted_to_truth"]["mean"], m["fitted_to_truth"]["rms"], m["fitted_to_truth"]["max"],
             m["symmetric"]["mean"], m["symmetric"]["hausdorff"]] for bone, m in metrics.items()]
    return _table(["bone", "mean_mm", "rms_mm", "max_mm", "sym_mean_mm", "hausdorff_mm"], rows)


# -- phantom -----------------------------------------------------------------------

def _member(i: int) -> str:
    return f"member_{i:03d}"


def write_population(pop: Population, out: Path, run: Run, volumes: bool, quality: str,
                     voxel_mm: float, margin_mm: float, members=None) -> dict:
    """Write meshes (and optionally volumes) of ``members``; returns the truth record."""
    members = range(len(pop)) if members is None else members
    records = []
    for i in members:
        name = _member(i)
        bones = split_bones(pop.base, pop.meshes[i])
        rec = {"name": name, "coefficients": pop.coefficients[i], "meshes": {}, "sha256": {}}
        for bone, mesh in bones.items():
            rel = f"meshes/{name}/{bone}.obj"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            write_obj(mesh, out / rel)
            rec["meshes"][bone] = rel
            rec["sha256"][rel] = sha256_file(out / rel)
            run.say(f"wrote {rel} ({mesh.n_vertices} vertices)")
        if volumes:
            grid = grid_around(list(bones.values()), voxel_mm, margin_mm)
            vol = synthesize_volume(list(bones.values()), grid, quality, run.seed, i)
            rel = f"volumes/{name}.nii"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            write_nifti(vol, out / rel)
            rec["volume"] = rel
            rec["grid"] = grid.to_dict()
            rec["sha256"][rel] = sha256_file(out / rel)
            run.say(f"wrote {rel} ({'x'.join(map(str, grid.dims))} voxels, {quality} quality)")
        records.append(rec)
    truth = pop.truth_dict()
    truth.update({"quality": quality if volumes else None, "voxel_mm": voxel_mm, "margin_mm": margin_mm,
                  "bones": list(pop.spec.bones), "members": records})
    return truth


def cmd_phantom(args, run: Run) -> int:
    if args.count < 1:
        raise InputError("count must be ≥ 1")
    spec = PhantomSpec.load(_existing(args.spec, "phantom spec"))
    if args.seed is not None:
        spec = replace(spec, seed=int(args.seed))
    run.seed = int(spec.seed)
    out = _out_dir(args, run)
    quality = args.quality or run.config.quality
    voxel = args.voxel_mm or run.config.voxel_mm
    pop = generate_population(spec, args.count)
    truth = write_population(pop, out, run, not args.no_volumes, quality, voxel, run.config.margin_mm)
    truth["provenance"] = run.provenance(count=args.count)
    write_json(out / "truth.json", truth)
    run.say(f"wrote truth.json ({args.count} members, {len(pop.resamples)} resampled)")
    return EXIT_OK


# -- build-model ------------------------------------------------------------------

def variance_table(model: ShapeModel) -> list:
    total = model.total_variance if model.total_variance else float(np.sum(model.eigenvalues))
    cum = np.cumsum(model.eigenvalues) / total if total > 0 else np.zeros(model.n_modes)
    return [{"mode": k + 1, "eigenvalue": float(lam), "fraction": float(lam / total) if total > 0 else 0.0,
             "cumulative": float(c)} for k, (lam, c) in enumerate(zip(model.eigenvalues, cum))]


def build_from_files(paths, rule: ModeRule, bone: str, with_scale: bool = True):
    meshes = [read_obj(p) for p in paths]
    aligned = generalized_procrustes(meshes, with_scale=with_scale)
    return build_model(aligned, rule, bone), aligned


def model_report(model: ShapeModel, aligned, rule: ModeRule, inputs) -> dict:
    return {
        "bone": model.bone_name,
        "inputs": [str(p) for p in inputs],
        "n_shapes": aligned.n_shapes,
        "n_landmarks": model.n_landmarks,
        "mode_rule": {"kind": rule.kind, "value": rule.value},
        "t": model.n_modes,
        "total_variance": model.total_variance,
        "variance_table": variance_table(model),
        "procrustes": {"iterations": aligned.iterations, "converged": aligned.converged,
                       "with_scale": aligned.with_scale, "centroid_size": aligned.centroid_size},
    }


def _print_model(run: Run, model: ShapeModel, report: dict) -> None:
    run.say(f"{model.bone_name}: t = {model.n_modes} modes from {report['n_shapes']} shapes "
            f"of {model.n_landmarks} landmarks")
    rows = [[str(r["mode"]), r["eigenvalue"], r["fraction"], r["cumulative"]] for r in report["variance_table"]]
    run.say(_table(["mode", "eigenvalue_mm2", "fraction", "cumulative"], rows))


def _report_path(model_path: Path) -> Path:
    return model_path.with_name(model_path.stem + ".report.json")


def cmd_build_model(args, run: Run) -> int:
    pattern = args.meshes or run.config.paths.get("meshes")
    if not pattern:
        raise InputError("no training meshes: pass a glob or set paths.meshes in the config")
    files = sorted(glob.glob(pattern))
    if not files:
        raise InputError(f"no meshes match {pattern!r}")
    out = args.out or run.config.paths.get("models")
    if not out:
        raise InputError("no model path: pass --out or set paths.models in the config")
    out = Path(out)
    rule = ModeRule.parse(args.mode_rule or run.config.mode_rule)
    bone = args.bone or Path(files[0]).stem
    model, aligned = build_from_files(files, rule, bone, with_scale=not args.rigid)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    report = model_report(model, aligned, rule, files)
    report["model"] = out.name
    report["provenance"] = run.provenance()
    write_json(_report_path(out), report)
    _print_model(run, model, report)
    run.say(f"wrote {out} and {_report_path(out).name}")
    return EXIT_OK


# -- segment ---------------------------------------------------------------------

def load_model_set(path) -> CoupledModelSet:
    """A model set JSON, or a single model JSON treated as a one-bone set."""
    path = _existing(path, "model file")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(d, dict) and "schema_version" in d:
        model = load_model(path)
        return CoupledModelSet({model.bone_name: model})
    return CoupledModelSet.from_dict(d, path.parent)


def segment(models: CoupledModelSet, volume, config: FitConfig, out: Path, run: Run,
            truth: dict | None = None, inputs: dict | None = None):
    """Fit, write ``<bone>.obj`` and ``fit.json``; returns (result, report)."""
    result = fit_coupled(models, volume, config)
    out.mkdir(parents=True, exist_ok=True)
    report = {"inputs": inputs or {}, "fit_config": config.to_dict(), "result": result.to_dict(),
              "meshes": {}}
    for bone, fit in result.bones.items():
        if fit.failed or fit.mesh is None:
            run.say(f"{bone}: FAILED ({fit.error})")
            continue
        write_obj(fit.mesh, out / f"{bone}.obj")
        report["meshes"][bone] = f"{bone}.obj"
        run.say(f"{bone}: wrote {bone}.obj, edge residual {fit.residual:.3f} mm, "
                f"{100 * fit.targeted_fraction:.0f}% of vertices targeted")
    if truth:
        metrics = {b: _stats(result.bones[b].mesh, truth[b]) for b in truth if not result.bones[b].failed}
        report["metrics"] = metrics
        if metrics:
            run.say(_metrics_table(metrics))
    report["provenance"] = run.provenance()
    write_json(out / "fit.json", report)
    run.say(f"wrote fit.json ({result.iterations} iterations, "
            f"{'converged' if result.converged else 'not converged'})")
    return result, report


def _truth_meshes(truth_dir, bones) -> dict:
    d = _existing(truth_dir, "truth directory")
    missing = [b for b in bones if not (d / f"{b}.obj").exists()]
    if missing:
        raise InputError(f"truth mesh missing for: {', '.join(missing)}")
    return {b: read_obj(d / f"{b}.obj") for b in bones}


def cmd_segment(args, run: Run) -> int:
    vol_path = args.volume or run.config.paths.get("volumes")
    if not vol_path:
        raise InputError("no volume: pass a NIfTI path or set paths.volumes in the config")
    model_path = args.models or run.config.paths.get("models")
    if not model_path:
        raise InputError("no model: pass --models or set paths.models in the config")
    models = load_model_set(model_path)
    volume = read_nifti(_existing(vol_path, "volume"))
    truth = _truth_meshes(args.truth, models.bones) if args.truth else None
    out = _out_dir(args, run)
    inputs = {"volume": str(vol_path), "models": str(model_path)}
    if args.truth:
        inputs["truth"] = str(args.truth)
    result, _ = segment(models, volume, run.config.fit, out, run, truth, inputs)
    if result.failed:
        first = result.bones[result.failed[0]].error
        raise ComputationError(f"fit failed for {', '.join(result.failed)}: {first}")
    return EXIT_OK


# -- plan ------------------------------------------------------------------------

def plan_and_check(injured, healthy, config: PipelineConfig, registration=None, tolerance=None):
    registration = registration or config.registration
    tolerance = float(tolerance or config.tolerance_mm)
    plan = plan_reduction(injured, healthy, config.plane(), registration, tolerance)
    check = validate_plan(plan, tolerance)
    if "non-finite values" in check.reasons:
        raise ComputationError("registration produced non-finite values")
    return plan, check


def plan_record(plan, check, run: Run, inputs: dict) -> dict:
    plan = plan.with_provenance(**run.provenance(), inputs=inputs)
    d = plan.to_dict()
    d["validation"] = {"passed": check.passed, "reasons": list(check.reasons)}
    return d


def cmd_plan(args, run: Run) -> int:
    injured = read_obj(_existing(args.injured, "injured mesh"))
    healthy = read_obj(_existing(args.healthy, "healthy mesh"))
    plan, check = plan_and_check(injured, healthy, run.config, args.registration, args.tolerance)
    out = Path(args.out) if args.out else _out_dir(args, run) / "plan.json"
    if out.is_dir():
        out = out / "plan.json"
    write_json(out, plan_record(plan, check, run, {"injured": str(args.injured), "healthy": str(args.healthy)}))
    run.say(plan.summary())
    for reason in check.reasons:
        run.say(f"  {reason}")
    run.say(f"wrote {out}")
    return EXIT_OK if check.passed else EXIT_TOLERANCE


# -- evaluate --------------------------------------------------------------------

def evaluate_dirs(fitted_dir, truth_dir) -> dict:
    fdir = _existing(fitted_dir, "fitted directory")
    tdir = _existing(truth_dir, "truth directory")
    fitted = {p.stem: p for p in sorted(fdir.glob("*.obj"))}
    truth = {p.stem: p for p in sorted(tdir.glob("*.obj"))}
    if not fitted:
        raise InputError(f"no meshes in {fdir}")
    missing = sorted(set(fitted) ^ set(truth))
    if missing:
        raise InputError(f"missing counterpart mesh for: {', '.join(missing)}")
    return {b: _stats(read_obj(fitted[b]), read_obj(truth[b])) for b in fitted}


def cmd_evaluate(args, run: Run) -> int:
    metrics = evaluate_dirs(args.fitted, args.truth)
    run.say(_metrics_table(metrics))
    if args.out:
        out = Path(args.out)
        if out.is_dir():
            out = out / "metrics.json"
        write_json(out, {"inputs": {"fitted": str(args.fitted), "truth": str(args.truth)},
                         "bones": metrics, "provenance": run.provenance()})
        run.say(f"wrote {out}")
    return EXIT_OK


# -- run-all ---------------------------------------------------------------------

def fracture_transform(fragment: TriangleMesh, spec: dict) -> SimilarityTransform:
    """Rotation about the fragment centroid followed by a translation."""
    c = fragment.vertices.mean(axis=0)
    R = rotation_about(spec["rotation_axis"], float(spec["rotation_deg"]))
    return SimilarityTransform(R, c - R @ c + np.asarray(spec["translation_mm"], dtype=np.float64))


def cmd_run_all(args, run: Run) -> int:
    """phantom -> build-model -> segment -> plan on one synthetic patient.

    The healthy limb is a held-out phantom member placed at
    ``healthy_offset_mm``. The injured limb is its mirror image, cut at
    ``fracture.cut_height`` with the distal fragment displaced by T*. The
    healthy side is segmented with the model built from the training
    members, cropped at the same height and mirrored to form the template.
    """
    cfg = run.config
    out = _out_dir(args, run)
    spec = cfg.phantom_spec()
    if len(spec.bones) != 1:
        raise InputError("run-all plans a single bone; use a single-bone phantom")
    bone = spec.bones[0]
    n_train = int(cfg.training_count)

    run.say("[1/4] phantom")
    pop = generate_population(spec, n_train + 1)
    truth = write_population(pop, out / "phantom", run, False, cfg.quality, cfg.voxel_mm, cfg.margin_mm,
                             members=range(n_train))
    truth["provenance"] = run.provenance(count=n_train)
    write_json(out / "phantom" / "truth.json", truth)

    run.say("[2/4] build-model")
    rule = ModeRule.parse(cfg.mode_rule)
    files = [out / "phantom" / m["meshes"][bone] for m in truth["members"]]
    model, aligned = build_from_files(files, rule, bone)
    (out / "model").mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model" / f"{bone}.json")
    report = model_report(model, aligned, rule, [f.relative_to(out) for f in files])
    report["provenance"] = run.provenance()
    write_json(out / "model" / f"{bone}.report.json", report)
    _print_model(run, model, report)

    # the held-out member is the patient
    healthy = apply_transform(pop.meshes[n_train], SimilarityTransform(translation=cfg.healthy_offset_mm))
    plane = cfg.plane()
    cut = float(cfg.fracture["cut_height"])
    injured = mirror(healthy, plane)
    _, distal = cut_mesh(injured, cut)
    t_star = fracture_transform(distal, cfg.fracture)
    proximal, fragment, _ = apply_fracture(injured, FractureScenario(cut, t_star))
    patient = out / "patient"
    (patient / "healthy").mkdir(parents=True, exist_ok=True)
    write_obj(healthy, patient / "healthy" / f"{bone}.obj")
    write_obj(proximal, patient / "injured_proximal.obj")
    write_obj(fragment, patient / "injured_distal.obj")
    grid = grid_around([healthy], cfg.voxel_mm, cfg.margin_mm)
    volume = synthesize_volume([healthy], grid, cfg.quality, run.seed, n_train)
    write_nifti(volume, patient / "healthy.nii")
    write_json(patient / "truth.json", {
        "coefficients": pop.coefficients[n_train], "healthy_offset_mm": list(cfg.healthy_offset_mm),
        "cut_height": cut, "displacement": t_star.to_dict(), "provenance": run.provenance()})

    run.say("[3/4] segment")
    result, seg = segment(CoupledModelSet({bone: model}), volume, cfg.fit, out / "segment", run,
                          {bone: healthy}, {"volume": "patient/healthy.nii", "models": f"model/{bone}.json"})
    if result.failed:
        raise ComputationError(f"segmentation failed: {result.bones[bone].error}")

    run.say("[4/4] plan")
    source = result.bones[bone].mesh if cfg.template == "segmented" else healthy
    _, template = cut_mesh(source, cut)
    (out / "plan").mkdir(exist_ok=True)
    write_obj(template, out / "plan" / "healthy_distal.obj")
    plan, check = plan_and_check(fragment, template, cfg)
    write_json(out / "plan" / "plan.json", plan_record(
        plan, check, run, {"injured": "patient/injured_distal.obj", "healthy": "plan/healthy_distal.obj"}))
    run.say(plan.summary())

    # the plan should undo T*: compare plan o T* with identity at the fragment
    err = compose(plan.transform, t_star)
    c = distal.vertices.mean(axis=0)
    rot_err = rotation_angle_deg(err.rotation)
    trans_err = float(np.linalg.norm(err.apply(c) - c))
    summary = {
        "segmentation": seg["metrics"][bone],
        "model_modes": model.n_modes,
        "plan": {"rotation_deg": plan.rotation_deg, "translation_mm": plan.translation_mm,
                 "residual_mean": plan.residual.mean, "residual_max": plan.residual.max,
                 "validation": {"passed": check.passed, "reasons": list(check.reasons)}},
        "reduction_error": {"rotation_deg": rot_err, "translation_mm": trans_err,
                            "measured_at": c},
        "provenance": run.provenance(),
    }
    write_json(out / "run_all.json", summary)
    run.say(f"reduction error after plan: {rot_err:.3f} deg, {trans_err:.3f} mm at the fragment centroid")
    run.say("wrote run_all.json")
    return EXIT_OK if check.passed else EXIT_TOLERANCE


# -- entry point -----------------------------------------------------------------

def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="pipeline config JSON")
    common.add_argument("--seed", type=_seed, metavar="U64", help="override the config (or phantom spec) seed")
    common.add_argument("--out", metavar="DIR", help="output directory (plan/evaluate: output file)")
    common.add_argument("--quiet", action="store_true", help="suppress the text summary")

    p = argparse.ArgumentParser(prog="ankle-reduce", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("phantom", parents=[common], help="generate a phantom population with ground truth")
    s.add_argument("spec", help="phantom spec JSON")
    s.add_argument("--count", type=int, required=True, help="number of population members")
    s.add_argument("--quality", choices=["high", "low"], help="volume quality tier (default from config)")
    s.add_argument("--voxel-mm", type=float, help="isotropic voxel size in mm (default from config)")
    s.add_argument("--no-volumes", action="store_true", help="write meshes and truth only")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("build-model", parents=[common], help="build a shape model from corresponded meshes")
    s.add_argument("meshes", nargs="?", help="glob of training OBJ files (quote it)")
    s.add_argument("--mode-rule", help="'f=<fraction>' or 't=<count>' (default f=0.98)")
    s.add_argument("--bone", help="bone name stored in the model (default: file stem)")
    s.add_argument("--rigid", action="store_true", help="align without scale")
    s.set_defaults(func=cmd_build_model)

    s = sub.add_parser("segment", parents=[common], help="fit a model (set) to a volume")
    s.add_argument("volume", nargs="?", help="NIfTI-1 volume")
    s.add_argument("--models", help="model JSON or coupled model set JSON")
    s.add_argument("--truth", help="directory of <bone>.obj truth meshes; adds a metrics block")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("plan", parents=[common], help="plan a reduction against the mirrored healthy side")
    s.add_argument("injured", help="injured fragment OBJ")
    s.add_argument("healthy", help="contralateral healthy OBJ")
    s.add_argument("--registration", choices=list(BACKENDS), help="registration backend (default from config)")
    s.add_argument("--tolerance", type=float, help="mean residual tolerance in mm")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("evaluate", parents=[common], help="surface distances between fitted and truth meshes")
    s.add_argument("fitted", help="directory of fitted <bone>.obj")
    s.add_argument("truth", help="directory of truth <bone>.obj")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run-all", parents=[common], help="phantom -> build-model -> segment -> plan")
    s.set_defaults(func=cmd_run_all)
    return p


def _threads() -> int:
    text = os.environ.get(THREADS_ENV, "").strip()
    if not text:
        return 0
    try:
        n = int(text)
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be an integer, got {text!r}")
    if n < 0:
        raise InputError(f"{THREADS_ENV} must be >= 0")
    return n


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        run = Run(args.command, args, config)
        set_workers(_threads())
        # single-threaded BLAS keeps every reduction in one summation order
        with threadpool_limits(limits=1, user_api="blas"):
            return args.func(args, run)
    except ComputationError as exc:
        print(f"ankle-reduce: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPUTATION
    except (InputError, OSError) as exc:
        print(f"ankle-reduce: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AnkleReduceError as exc:
        print(f"ankle-reduce: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPUTATION


if __name__ == "__main__":
    sys.exit(main())
