import json

import numpy as np
import pytest

from ankle_reduce.errors import InputError, PlaneMisses
from ankle_reduce.geometry import SimilarityTransform, face_normals, is_closed, rotation_about, signed_volume
from ankle_reduce.phantom import (
    FractureScenario,
    ModeDef,
    PhantomSpec,
    apply_fracture,
    base_phantom,
    generate_population,
    grid_around,
    mode_fields,
    split_bones,
    synthesize_volume,
)
from ankle_reduce.volume import GridSpec, gradient_magnitude, voxelize
from ankle_reduce.geometry import icosphere

MODES = [ModeDef("bulge", 4.0), ModeDef("bend", 2.0), ModeDef("torsion", 1.0)]


@pytest.mark.parametrize("shape", ["superellipsoid", "tube", "two_bone_joint"])
def test_population_deterministic_and_shared_faces(shape):
    spec = PhantomSpec(shape, 162, MODES, seed=2024)
    a = generate_population(spec, 6)
    b = generate_population(spec, 6)
    for x, y in zip(a, b):
        assert np.array_equal(x.vertices, y.vertices)
        assert x.faces is a[0].faces or np.array_equal(x.faces, a[0].faces)
    assert np.array_equal(a.coefficients, b.coefficients)
    assert all(is_closed(m) and signed_volume(m) > 0 for m in a)


def test_seed_changes_population():
    a = generate_population(PhantomSpec("tube", 162, MODES, seed=1), 3)
    b = generate_population(PhantomSpec("tube", 162, MODES, seed=2), 3)
    assert not np.array_equal(a.coefficients, b.coefficients)


def test_zero_variance_is_base():
    spec = PhantomSpec("superellipsoid", 162, [ModeDef("bulge", 0.0)], seed=3)
    pop = generate_population(spec, 4)
    base = base_phantom(spec).mesh
    assert all(np.array_equal(m.vertices, base.vertices) for m in pop)


def test_sample_variance_of_coefficients():
    # the 15% band is about 1.5 standard errors at N = 200, so this holds for most seeds, not all
    pop = generate_population(PhantomSpec("superellipsoid", 162, [ModeDef("bulge", 4.0)], seed=2024), 200)
    assert np.var(pop.coefficients[:, 0], ddof=1) == pytest.approx(4.0, rel=0.15)


def test_coefficient_variance_unbiased_across_seeds():
    v = [np.var(generate_population(PhantomSpec("superellipsoid", 42, [ModeDef("bulge", 4.0)], seed=s),
                                    200).coefficients[:, 0], ddof=1) for s in range(60)]
    # standard error of the mean of 60 sample variances is about 0.05
    assert np.mean(v) == pytest.approx(4.0, abs=0.2)


@pytest.mark.parametrize("shape", ["superellipsoid", "tube", "two_bone_joint"])
def test_fields_orthonormal(shape):
    F = mode_fields(PhantomSpec(shape, 162, MODES))
    assert np.max(np.abs(F.T @ F - np.eye(3))) < 1e-12


def test_fields_orthogonal_to_similarity_motions():
    spec = PhantomSpec("superellipsoid", 162, MODES)
    V = base_phantom(spec).mesh.vertices
    F = mode_fields(spec)
    c = V - V.mean(axis=0)
    motions = [np.tile(e, (len(V), 1)).ravel() for e in np.eye(3)]
    motions += [np.cross(e, c).ravel() for e in np.eye(3)] + [c.ravel()]
    assert np.max(np.abs(np.stack(motions) @ F)) < 1e-10


def test_fold_rejection_is_recorded():
    # a huge bump folds most draws; survivors keep every face normal on its side
    spec = PhantomSpec("superellipsoid", 162, [ModeDef("bump", 40000.0, {"width": 0.05})], seed=5)
    pop = generate_population(spec, 10)
    assert pop.resamples
    n0 = face_normals(base_phantom(spec).mesh, unit=False)
    for m in pop:
        assert np.all(np.sum(n0 * face_normals(m, unit=False), axis=1) > 0)
    assert pop.truth_dict()["resamples"] == [list(r) for r in pop.resamples]


def test_two_bone_gap_and_split():
    spec = PhantomSpec("two_bone_joint", 162, [], joint_gap=2.5)
    base = base_phantom(spec)
    parts = split_bones(base, base.mesh)
    up, lo = parts["upper"].vertices, parts["lower"].vertices
    assert up[:, 2].min() - lo[:, 2].max() == pytest.approx(2.5, abs=1e-12)
    assert is_closed(parts["upper"]) and is_closed(parts["lower"])


def test_spec_validation_and_json(tmp_path):
    with pytest.raises(InputError):
        PhantomSpec("cube", 162)
    with pytest.raises(InputError):
        PhantomSpec("tube", 20)
    with pytest.raises(InputError):
        PhantomSpec("two_bone_joint", 162, joint_gap=-1)
    with pytest.raises(InputError):
        PhantomSpec("tube", 162, [ModeDef("bulge", -1.0)])
    spec = PhantomSpec("tube", 162, MODES, seed=2**63 + 5)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    again = PhantomSpec.load(path)
    assert again.to_dict() == spec.to_dict()
    assert np.array_equal(generate_population(again, 2).coefficients, generate_population(spec, 2).coefficients)


# -- volumes -------------------------------------------------------------------

@pytest.fixture(scope="module")
def sphere_case():
    sphere = icosphere(3, radius=10.0)
    grid = GridSpec.around(sphere.vertices.min(0), sphere.vertices.max(0), 1.0, 6.0)
    return sphere, grid


def test_interior_intensity(sphere_case):
    sphere, grid = sphere_case
    vol = synthesize_volume([sphere], grid, "high", seed=1)
    r = np.linalg.norm(grid.voxel_centers() - 0.0, axis=1).reshape(grid.dims, order="F")
    inner = vol.data[r < 7.0]
    assert inner.mean() == pytest.approx(1000.0, rel=0.02)
    assert np.abs(vol.data[r > 14.0]).mean() < 20.0


def test_volume_deterministic(sphere_case):
    sphere, grid = sphere_case
    a = synthesize_volume([sphere], grid, "low", seed=4)
    b = synthesize_volume([sphere], grid, "low", seed=4)
    assert np.array_equal(a.data, b.data) and a.data.dtype == np.float32
    c = synthesize_volume([sphere], grid, "low", seed=5)
    assert not np.array_equal(a.data, c.data)


def test_low_quality_has_weaker_edges(sphere_case):
    sphere, grid = sphere_case
    # peak gradient along radial profiles, averaged to damp the noise
    peaks = {}
    for q in ("high", "low"):
        g = gradient_magnitude(synthesize_volume([sphere], grid, q, seed=8))
        r = np.linalg.norm(grid.voxel_centers(), axis=1).reshape(grid.dims, order="F")
        peaks[q] = g.data[np.abs(r - 10.0) < 0.75].mean()
    assert peaks["low"] < peaks["high"]


def test_overlap_is_capped():
    a = icosphere(2, radius=6.0)
    b = icosphere(2, radius=6.0, center=(4.0, 0, 0))
    grid = grid_around([a, b], 1.0, 3.0)
    acc = voxelize(a, grid).data + voxelize(b, grid).data
    vol = synthesize_volume([a, b], grid, "high", seed=0)
    both = acc == 2
    assert both.any()
    assert vol.data[both].mean() == pytest.approx(1000.0, rel=0.03)


def test_bad_quality(sphere_case):
    sphere, grid = sphere_case
    with pytest.raises(InputError):
        synthesize_volume([sphere], grid, "metal")


# -- fractures -----------------------------------------------------------------

@pytest.fixture(scope="module")
def fibula():
    return base_phantom(PhantomSpec("tube", 642)).mesh


def test_identity_fracture(fibula):
    prox, dist, gt = apply_fracture(fibula, FractureScenario(-12.0))
    assert gt == SimilarityTransform.identity() or np.allclose(gt.matrix, np.eye(4))
    assert is_closed(prox) and is_closed(dist)
    assert dist.vertices[:, 2].max() <= -12.0 + 1e-9 and prox.vertices[:, 2].min() >= -12.0 - 1e-9
    assert signed_volume(prox) + signed_volume(dist) == pytest.approx(signed_volume(fibula), rel=1e-9)


def test_fracture_voxel_volumes_sum(fibula):
    prox, dist, _ = apply_fracture(fibula, FractureScenario(-12.0))
    grid = grid_around([fibula], 0.75, 3.0)
    whole = voxelize(fibula, grid).data.sum()
    parts = voxelize(prox, grid).data.sum() + voxelize(dist, grid).data.sum()
    assert parts == pytest.approx(whole, rel=0.03)


def test_displaced_fragment(fibula):
    disp = SimilarityTransform(rotation_about([0, 1, 0], 8.0), [5.0, 0.0, 0.0])
    prox0, dist0, _ = apply_fracture(fibula, FractureScenario(-10.0))
    prox, dist, gt = apply_fracture(fibula, FractureScenario(-10.0, disp))
    assert gt is disp
    assert np.array_equal(prox.vertices, prox0.vertices)
    assert np.allclose(dist.vertices, disp.apply(dist0.vertices), atol=1e-12)
    p2, d2, _ = apply_fracture(fibula, FractureScenario(-10.0, disp, fragment="proximal"))
    assert np.array_equal(d2.vertices, dist0.vertices)


def test_plane_misses(fibula):
    with pytest.raises(PlaneMisses):
        apply_fracture(fibula, FractureScenario(500.0))
    with pytest.raises(PlaneMisses):
        apply_fracture(fibula, FractureScenario(-500.0))


def test_plane_through_vertices():
    box_mesh = icosphere(2, radius=5.0)
    prox, dist, _ = apply_fracture(box_mesh, FractureScenario(0.0))
    assert is_closed(prox) and is_closed(dist)
    assert signed_volume(prox) + signed_volume(dist) == pytest.approx(signed_volume(box_mesh), rel=1e-9)


def test_scenario_must_be_rigid():
    with pytest.raises(InputError):
        FractureScenario(0.0, SimilarityTransform(scale=1.1))
