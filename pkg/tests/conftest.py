import numpy as np
import pytest

import ankle_reduce.shape_model as shape_model
from ankle_reduce.geometry import SimilarityTransform, TriangleMesh, rotation_about


# -- PCA structural checks on every model the suite builds -----------------------------

def check_model_structure(model, aligned, rng=None):
    """Orthonormal modes, descending eigenvalues, reconstruction error
    non-increasing in t, synthesize/project mutual inverses."""
    t = model.n_modes
    P = model.modes
    assert np.max(np.abs(P.T @ P - np.eye(t)), initial=0.0) <= 1e-8
    assert np.all(np.diff(model.eigenvalues) <= 0)
    for x in aligned.shapes:
        errs = [shape_model.reconstruction_rms(model, x, k) for k in range(t + 1)]
        assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))
    if t:
        rng = rng or np.random.default_rng(0)
        b = rng.normal(size=t) * model.sd
        back, _ = shape_model.project(model, shape_model.synthesize(model, b))
        assert np.max(np.abs(back - b)) <= 1e-9 * max(1.0, float(np.max(np.abs(b))))
        x = shape_model.synthesize(model, back).vertices.ravel()
        y = shape_model.synthesize(model, b).vertices.ravel()
        assert np.max(np.abs(x - y)) <= 1e-9 * max(1.0, float(np.max(np.abs(y))))


BUILT_MODELS = []
_build_model = shape_model.build_model


def _checked_build_model(aligned, *args, **kwargs):
    model = _build_model(aligned, *args, **kwargs)
    check_model_structure(model, aligned)
    BUILT_MODELS.append(model.n_modes)
    return model


# installed before any test module imports build_model, so every model built
# anywhere in the suite (library, CLI or test code) is checked
shape_model.build_model = _checked_build_model


# -- acceptance report ---------------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when != "call" and rep.passed:
        return
    # "detail" properties go to every criterion of the test, "detail N" to criterion N only
    for marker in item.iter_markers("criterion"):
        n, title = marker.args
        entry = _CRITERIA.setdefault(n, {"title": title, "passed": True, "details": []})
        entry["passed"] = entry["passed"] and rep.passed
        if rep.when == "call":
            entry["details"] += [str(v) for k, v in item.user_properties if k in ("detail", f"detail {n}")]

def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if e['passed'] else 'FAIL'}  {e['title']}"
                                    + (f"  [{detail}]" if detail else ""))
    if 2 in _CRITERIA:
        terminalreporter.write_line(f"shape models structurally checked this session: {len(BUILT_MODELS)}")


def random_rotation(rng, max_deg=180.0):
    axis = rng.normal(size=3)
    return rotation_about(axis, rng.uniform(-max_deg, max_deg))


def random_similarity(rng, max_deg=180.0, max_t=20.0, scale_range=(0.5, 2.0)):
    return SimilarityTransform(
        random_rotation(rng, max_deg),
        rng.uniform(-max_t, max_t, size=3),
        rng.uniform(*scale_range),
    )


def extruded_polygon(poly2d, height):
    """Closed prism over a polygon that is fan-triangulable from vertex 0."""
    poly = np.asarray(poly2d, dtype=float)
    k = len(poly)
    bottom = np.c_[poly, np.zeros(k)]
    top = np.c_[poly, np.full(k, height)]
    V = np.vstack([bottom, top])
    F = []
    for i in range(1, k - 1):
        F.append((0, i + 1, i))  # bottom faces down
        F.append((k, k + i, k + i + 1))
    for i in range(k):
        j = (i + 1) % k
        F += [(i, j, k + j), (i, k + j, k + i)]
    return TriangleMesh(V, np.array(F))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def l_prism():
    return extruded_polygon([(0, 0), (2, 0), (2, 1), (1, 1), (1, 3), (0, 3)], 1.5)
