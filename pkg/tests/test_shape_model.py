import json
from dataclasses import replace

import numpy as np
import pytest

from ankle_reduce.errors import (
    CorruptModel,
    InsufficientSamples,
    LengthMismatch,
    SchemaVersionMismatch,
    TopologyMismatch,
)
from ankle_reduce.geometry import icosphere, rotation_about
from ankle_reduce.pointreg import umeyama_similarity
from ankle_reduce.phantom import ModeDef, PhantomSpec, generate_population
from ankle_reduce.shape_model import (
    ModeRule,
    build_model,
    centroid_size,
    clamp_coefficients,
    generalized_procrustes,
    load_model,
    model_from_dict,
    model_to_dict,
    project,
    reconstruction_rms,
    save_model,
    synthesize,
)


def _ellipsoid():
    s = icosphere(2)
    return s.with_vertices(s.vertices * [15.0, 10.0, 7.0] + [3.0, -2.0, 1.0])


def _random_training(rng, n_shapes=10, noise=0.8):
    base = _ellipsoid()
    return [base.with_vertices(base.vertices + rng.normal(scale=noise, size=base.vertices.shape))
            for _ in range(n_shapes)]


def _subspace_angle_deg(A, B):
    qa, _ = np.linalg.qr(A)
    qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return float(np.degrees(np.arccos(np.clip(s.min(), -1, 1))))


# -- Procrustes ------------------------------------------------------------------

def test_gpa_rotated_copy():
    a = _ellipsoid()
    b = a.with_vertices(rotation_about([0, 0, 1], 30).dot(a.vertices.T).T)
    out = generalized_procrustes([a, b], with_scale=True)
    d = out.shapes[0].vertices - out.shapes[1].vertices
    assert np.sqrt(np.mean(np.sum(d * d, axis=1))) < 1e-9
    centered = a.vertices - a.vertices.mean(axis=0)
    # mean equals the shape up to a rotation
    R = umeyama_similarity(centered, out.mean_shape.vertices, with_scale=False)
    assert np.allclose(R.apply(centered), out.mean_shape.vertices, atol=1e-9)


def test_gpa_prealigned_converges_in_one_iteration(rng):
    first = generalized_procrustes(_random_training(rng), with_scale=True)
    again = generalized_procrustes(first.shapes, with_scale=True)
    assert again.converged and again.iterations == 1
    for t in again.alignments:
        assert np.allclose(t.rotation, np.eye(3), atol=1e-8)
        assert abs(t.scale - 1.0) < 1e-8
        assert np.allclose(t.translation, 0, atol=1e-8)


def test_gpa_scaled_copies_collapse():
    a = _ellipsoid()
    shapes = [a.with_vertices(a.vertices * s) for s in (0.5, 1.0, 2.0)]
    out = generalized_procrustes(shapes, with_scale=True)
    V = [s.vertices for s in out.shapes]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.sqrt(np.mean(np.sum((V[i] - V[j]) ** 2, axis=1))) < 1e-9


def test_gpa_mean_invariants(rng):
    out = generalized_procrustes(_random_training(rng), with_scale=True)
    avg = np.mean([s.vertices for s in out.shapes], axis=0)
    assert np.max(np.abs(out.mean_shape.vertices - avg)) < 1e-9
    assert np.allclose(out.mean_shape.vertices.mean(axis=0), 0, atol=1e-9)
    assert all(np.array_equal(s.faces, out.shapes[0].faces) for s in out.shapes)


def test_gpa_alignments_map_original_to_aligned(rng):
    shapes = _random_training(rng)
    out = generalized_procrustes(shapes, with_scale=True)
    for t, s, a in zip(out.alignments, shapes, out.shapes):
        assert np.allclose(t.apply(s.vertices), a.vertices, atol=1e-12)


def test_gpa_rigid_keeps_size(rng):
    a = _ellipsoid()
    shapes = [a, a.with_vertices(a.vertices * 1.1)]
    out = generalized_procrustes(shapes, with_scale=False)
    assert all(t.scale == 1.0 for t in out.alignments)
    sizes = [centroid_size(s.vertices) for s in out.shapes]
    assert sizes[1] == pytest.approx(1.1 * sizes[0], rel=1e-9)


def test_gpa_errors():
    a = _ellipsoid()
    with pytest.raises(InsufficientSamples):
        generalized_procrustes([a])
    with pytest.raises(TopologyMismatch):
        generalized_procrustes([a, icosphere(1)])


# -- model building ------------------------------------------------------------

def test_full_fraction_reconstructs_training(rng):
    shapes = _random_training(rng, 8)
    aligned = generalized_procrustes(shapes)
    model = build_model(aligned, ModeRule.fraction(1.0))
    assert model.n_modes == 7
    for s in aligned.shapes:
        b, res = project(model, s)
        assert res < 1e-7
        assert np.max(np.abs(synthesize(model, b).vertices - s.vertices)) < 1e-7


def test_fixed_t_three(rng):
    model = build_model(generalized_procrustes(_random_training(rng, 10)), ModeRule.fixed(3))
    assert model.n_modes == 3
    assert np.max(np.abs(model.modes.T @ model.modes - np.eye(3))) < 1e-8


def test_fixed_t_capped_at_n_minus_one(rng):
    model = build_model(generalized_procrustes(_random_training(rng, 4)), ModeRule.fixed(20))
    assert model.n_modes == 3


def test_model_invariants(rng):
    shapes = _random_training(rng, 12)
    aligned = generalized_procrustes(shapes)
    model = build_model(aligned, ModeRule.fraction(1.0))
    lam = model.eigenvalues
    assert np.all(np.diff(lam) <= 0) and np.all(lam >= 0)
    assert model.n_modes <= len(shapes) - 1
    X = aligned.data_matrix()
    trace = np.sum(np.var(X, axis=0, ddof=1))
    assert lam.sum() == pytest.approx(trace, rel=1e-6)
    assert model.total_variance == pytest.approx(trace, rel=1e-12)
    # the largest-magnitude entry of each column is positive
    big = np.argmax(np.abs(model.modes), axis=0)
    assert np.all(model.modes[big, np.arange(model.n_modes)] > 0)


def test_gram_trick_matches_full_covariance(rng):
    aligned = generalized_procrustes(_random_training(rng, 6))
    model = build_model(aligned, ModeRule.fraction(1.0))
    C = np.cov(aligned.data_matrix().T, ddof=1)
    w = np.linalg.eigvalsh(C)[::-1][: model.n_modes]
    assert np.allclose(model.eigenvalues, w, rtol=1e-8, atol=1e-10)


def test_reconstruction_error_monotone_in_t(rng):
    aligned = generalized_procrustes(_random_training(rng, 9))
    model = build_model(aligned, ModeRule.fraction(1.0))
    for s in aligned.shapes:
        errs = [reconstruction_rms(model, s, t) for t in range(1, model.n_modes + 1)]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_permutation_invariance(rng):
    shapes = _random_training(rng, 8)
    m1 = build_model(generalized_procrustes(shapes), ModeRule.fixed(4))
    m2 = build_model(generalized_procrustes(shapes[::-1]), ModeRule.fixed(4))
    assert np.allclose(m1.eigenvalues, m2.eigenvalues, rtol=1e-6)
    dots = np.abs(np.sum(m1.modes * m2.modes, axis=0))
    assert np.allclose(dots, 1.0, atol=1e-6)


def test_fraction_rule_picks_minimal_t(rng):
    aligned = generalized_procrustes(_random_training(rng, 8))
    full = build_model(aligned, ModeRule.fraction(1.0))
    frac = np.cumsum(full.eigenvalues) / full.eigenvalues.sum()
    f = 0.5 * (frac[2] + frac[3])
    assert build_model(aligned, ModeRule.fraction(f)).n_modes == 4
    assert build_model(aligned, ModeRule.fraction(frac[2])).n_modes == 3


def test_recovers_phantom_modes():
    spec = PhantomSpec("superellipsoid", 642, [ModeDef("bulge", 4.0), ModeDef("bend", 1.0)], seed=11)
    pop = generate_population(spec, 50)
    model = build_model(generalized_procrustes(pop.meshes), ModeRule.fraction(0.999999))
    oracle = np.linalg.eigvalsh(np.cov(pop.coefficients.T, ddof=1))[::-1]
    assert model.eigenvalues[:2] == pytest.approx(oracle, rel=0.05)
    if model.n_modes > 2:
        assert model.eigenvalues[2] < 0.01 * model.eigenvalues[0]
    assert _subspace_angle_deg(model.modes[:, :2], pop.fields) < 1.0


def test_mode_rule_parse():
    assert ModeRule.parse("t=3") == ModeRule.fixed(3)
    assert ModeRule.parse("f=0.9") == ModeRule.fraction(0.9)
    with pytest.raises(Exception):
        ModeRule.parse("k=2")


# -- synthesize / project / clamp ---------------------------------------------------

@pytest.fixture
def model(rng):
    return build_model(generalized_procrustes(_random_training(rng, 10)), ModeRule.fixed(5))


def test_synthesize_mean_and_sd(model):
    assert np.array_equal(synthesize(model, np.zeros(5)).vertices.ravel(), model.mean)
    b = np.zeros(5)
    b[0] = 10 * model.sd[0]
    shape = synthesize(model, b)
    got, _ = project(model, shape)
    assert got[0] == pytest.approx(10 * model.sd[0], rel=1e-12)
    with pytest.raises(LengthMismatch):
        synthesize(model, np.zeros(4))


def test_synthesize_project_inverse(model, rng):
    b = rng.normal(size=5) * model.sd
    got, res = project(model, synthesize(model, b))
    assert np.max(np.abs(got - b)) < 1e-9 and res < 1e-9
    b0, r0 = project(model, model.mean_mesh())
    assert np.max(np.abs(b0)) < 1e-12 and r0 < 1e-12


def test_project_orthogonal_vector(model, rng):
    v = rng.normal(size=len(model.mean))
    for c in model.modes.T:  # Gram-Schmidt against the modes
        v -= c * (c @ v)
    for c in model.modes.T:
        v -= c * (c @ v)
    b, res = project(model, model.mean + v)
    assert np.max(np.abs(b)) < 1e-9
    assert res == pytest.approx(np.sqrt(np.mean(v * v)), rel=1e-9)


def test_project_topology_mismatch(model):
    with pytest.raises(TopologyMismatch):
        project(model, icosphere(1))


def test_clamp(model):
    inside = 0.5 * model.sd
    assert np.array_equal(clamp_coefficients(model, inside, 3.0), inside)
    assert np.allclose(clamp_coefficients(model, 5 * model.sd, 3.0), 3 * model.sd)
    assert np.allclose(clamp_coefficients(model, -5 * model.sd, 3.0), -3 * model.sd)
    lam = model.eigenvalues.copy()
    lam[-1] = 0.0
    zero = replace(model, eigenvalues=lam)
    assert clamp_coefficients(zero, np.ones(5), 3.0)[-1] == 0.0


# -- persistence ------------------------------------------------------------------

def test_save_load_roundtrip(model, tmp_path):
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_model(model, p1)
    loaded = load_model(p1)
    save_model(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(loaded.mean, model.mean)
    assert np.array_equal(loaded.modes, model.modes)
    assert np.array_equal(loaded.eigenvalues, model.eigenvalues)
    assert np.array_equal(loaded.faces, model.faces)
    d = json.loads(p1.read_text())
    assert d["schema_version"] == "1" and len(d["modes"]) == d["n_modes"] == 5
    assert len(d["modes"][0]) == 3 * d["n_landmarks"]


def test_corrupt_and_version(model, tmp_path):
    d = model_to_dict(build_model_fixed3(model))
    d["eigenvalues"] = d["eigenvalues"][:2]
    with pytest.raises(CorruptModel):
        model_from_dict(d)
    d = model_to_dict(model)
    d["schema_version"] = "7"
    with pytest.raises(SchemaVersionMismatch):
        model_from_dict(d)
    d = model_to_dict(model)
    d["modes"][0][0] += 0.5
    with pytest.raises(CorruptModel):
        model_from_dict(d)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(CorruptModel):
        load_model(bad)


def build_model_fixed3(model):
    return replace(model, modes=model.modes[:, :3], eigenvalues=model.eigenvalues[:3])
