import numpy as np
import pytest

from ankle_reduce.errors import DegenerateConfiguration
from ankle_reduce.geometry import SimilarityTransform, compose, icosphere, invert, rotation_about, rotation_angle_deg
from ankle_reduce.pointreg import (
    PointCloud,
    cpd_rigid,
    icp_rigid,
    nearest_neighbors,
    nearest_neighbors_brute,
    read_xyz,
    rms_between,
    umeyama_similarity,
    write_xyz,
)

from conftest import random_rotation, random_similarity


def _surface_cloud(n_sub=3, axes=(20.0, 10.0, 8.0)):
    return icosphere(n_sub).vertices * np.array(axes)


def _rot_err(a, b):
    return rotation_angle_deg(a.rotation.T @ b.rotation)


def test_umeyama_recovers_similarity(rng):
    src = rng.normal(scale=10, size=(200, 3))
    T = random_similarity(rng)
    got = umeyama_similarity(src, T.apply(src))
    assert np.max(np.abs(got.rotation - T.rotation)) < 1e-9
    assert np.max(np.abs(got.translation - T.translation)) < 1e-9
    assert abs(got.scale - T.scale) < 1e-9


def test_umeyama_identity(rng):
    src = rng.normal(size=(50, 3))
    t = umeyama_similarity(src, src)
    np.testing.assert_allclose(t.matrix, np.eye(4), atol=1e-12)


def test_umeyama_rigid_on_scaled_data_is_optimal(rng):
    src = rng.normal(scale=5, size=(60, 3))
    dst = 2.0 * src
    t = umeyama_similarity(src, dst, with_scale=False)
    assert t.scale == 1.0
    best = rms_between(t.apply(src), dst)
    assert best > 0
    # random-restart oracle: random and perturbed rigid transforms never do better
    for i in range(2000):
        if i % 2:
            cand = SimilarityTransform(random_rotation(rng), rng.normal(scale=5, size=3))
        else:
            cand = SimilarityTransform(
                random_rotation(rng, 2.0) @ t.rotation, t.translation + rng.normal(scale=0.2, size=3)
            )
        assert rms_between(cand.apply(src), dst) >= best - 1e-12


def test_umeyama_global_minimum_similarity(rng):
    src = rng.normal(scale=5, size=(40, 3))
    dst = random_similarity(rng).apply(src) + rng.normal(scale=0.5, size=src.shape)
    t = umeyama_similarity(src, dst)
    best = rms_between(t.apply(src), dst)
    for i in range(10_000):
        if i % 2:
            cand = random_similarity(rng)
        else:
            cand = SimilarityTransform(
                random_rotation(rng, 1.0) @ t.rotation,
                t.translation + rng.normal(scale=0.1, size=3),
                t.scale * np.exp(rng.normal(scale=0.01)),
            )
        assert rms_between(cand.apply(src), dst) >= best - 1e-12


def test_umeyama_degenerate():
    line = np.c_[np.arange(10.0), np.zeros(10), np.zeros(10)]
    with pytest.raises(DegenerateConfiguration):
        umeyama_similarity(line, line)


def test_nearest_neighbors_self_and_single(rng):
    pts = rng.normal(size=(100, 3))
    idx, d = nearest_neighbors(pts, pts)
    np.testing.assert_array_equal(idx, np.arange(100))
    np.testing.assert_array_equal(d, 0.0)
    idx, _ = nearest_neighbors(pts, pts[:1])
    np.testing.assert_array_equal(idx, 0)


def test_nearest_neighbors_match_brute(rng):
    ref = rng.uniform(-10, 10, size=(1000, 3))
    q = rng.uniform(-12, 12, size=(1000, 3))
    a = nearest_neighbors(q, ref)
    b = nearest_neighbors_brute(q, ref)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_nearest_neighbors_ties_smallest_index():
    # integer lattice: many exactly tied neighbors
    g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    q = g[:-1] + 0.5
    a = nearest_neighbors(q, g)
    b = nearest_neighbors_brute(q, g)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_icp_recovers_rigid(rng):
    src = rng.uniform(-1, 1, size=(500, 3)) * [20.0, 15.0, 10.0]
    T = SimilarityTransform(rotation_about([0, 0, 1], 10), [5, 0, 0])
    r = icp_rigid(src, T.apply(src))
    assert _rot_err(r.transform, T) < 0.5
    assert np.linalg.norm(r.transform.translation - T.translation) < 0.2
    assert r.transform.scale == 1.0
    assert np.all(np.diff(r.trace) <= 1e-12)


def test_icp_identity_fast():
    src = _surface_cloud(2)
    r = icp_rigid(src, src)
    np.testing.assert_allclose(r.transform.matrix, np.eye(4), atol=1e-9)
    assert r.converged and r.iterations <= 2


def test_icp_cannot_scale():
    src = _surface_cloud(2)
    r = icp_rigid(src, 1.5 * src)
    assert r.converged
    assert r.transform.scale == 1.0
    assert r.rms_residual > 0.5
    sim = umeyama_similarity(src, 1.5 * src)
    assert rms_between(sim.apply(src), 1.5 * src) < 1e-9


def test_cpd_similarity_recovery():
    src = _surface_cloud(3)
    T = SimilarityTransform(rotation_about([0.2, 0.3, 1], 15), [3, -2, 5], 1.2)
    r = cpd_rigid(src, T.apply(src), with_scale=True)
    assert abs(r.transform.scale / 1.2 - 1) < 0.01
    assert _rot_err(r.transform, T) < 1.0
    assert np.linalg.norm(r.transform.translation - T.translation) < 0.5
    assert np.all(np.diff(r.trace) <= 1e-9 * np.maximum(1, np.abs(r.trace[:-1])))


def test_cpd_identity_rigid():
    src = _surface_cloud(2)
    r = cpd_rigid(src, src, with_scale=False)
    assert r.transform.scale == 1.0
    np.testing.assert_allclose(r.transform.matrix, np.eye(4), atol=1e-6)


def test_cpd_outliers_beat_icp(rng):
    src = _surface_cloud(3)
    T = SimilarityTransform(rotation_about([1, 0.5, 0.2], 12), [4, 3, -2], 1.1)
    dst = T.apply(src)
    lo, hi = dst.min(0), dst.max(0)
    out = rng.uniform(lo, hi, size=(len(src) // 10, 3))
    cloud = np.vstack([dst, out])
    r = cpd_rigid(src, cloud, with_scale=True, outlier_w=0.1)
    assert _rot_err(r.transform, T) < 2.0
    assert np.linalg.norm(r.transform.translation - T.translation) < 1.0
    assert abs(r.transform.scale / T.scale - 1) < 0.02


def test_cpd_weights_equivalent_to_duplication(rng):
    src = _surface_cloud(1)
    T = SimilarityTransform(rotation_about([0, 1, 0], 5), [1, 0, 0], 1.0)
    dst = T.apply(src) + rng.normal(scale=0.3, size=src.shape)
    w = rng.integers(1, 3, size=len(dst)).astype(float)
    a = cpd_rigid(src, PointCloud(dst, w), max_iters=20, tol=0)
    b = cpd_rigid(src, np.repeat(dst, w.astype(int), axis=0), max_iters=20, tol=0)
    np.testing.assert_allclose(a.transform.matrix, b.transform.matrix, atol=1e-8)


@pytest.mark.parametrize("method", ["umeyama", "icp", "cpd"])
def test_registration_equivariance(rng, method):
    src = _surface_cloud(2)
    T = SimilarityTransform(rotation_about([0, 0.4, 1], 8), [2, 1, -1])
    dst = T.apply(src)
    Q = SimilarityTransform(random_rotation(rng), rng.normal(scale=30, size=3))
    run = {
        "umeyama": lambda a, b: umeyama_similarity(a, b, with_scale=False),
        "icp": lambda a, b: icp_rigid(a, b).transform,
        "cpd": lambda a, b: cpd_rigid(a, b, with_scale=False).transform,
    }[method]
    t0 = run(src, dst)
    t1 = run(Q.apply(src), Q.apply(dst))
    conj = compose(Q, compose(t0, invert(Q)))
    np.testing.assert_allclose(t1.matrix, conj.matrix, atol=1e-6)


def test_xyz_roundtrip(tmp_path, rng):
    pts = rng.normal(size=(20, 3))
    write_xyz(pts, tmp_path / "p.xyz")
    back = read_xyz(tmp_path / "p.xyz")
    np.testing.assert_allclose(back.points, pts, rtol=1e-8)
