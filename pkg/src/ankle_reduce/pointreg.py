"""Point-set registration: closed-form similarity fit, rigid ICP and rigid CPD."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, InputError, NumericalCollapse
from .geometry import SimilarityTransform
from .parallel import workers

SIGMA2_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if len(p) < 1:
            raise InputError("point cloud is empty")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)
        if self.weights is not None:
            w = np.array(self.weights, dtype=np.float64, copy=True).reshape(-1)
            if len(w) != len(p):
                raise InputError("weights length does not match points")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise InputError("weights must be finite and nonnegative")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.points)


def as_cloud(x) -> PointCloud:
    return x if isinstance(x, PointCloud) else PointCloud(x)


@dataclass
class RegistrationReport:
    transform: SimilarityTransform
    rms_residual: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    sigma2: float | None = None

    def to_dict(self) -> dict:
        d = {
            "transform": self.transform.to_dict(),
            "rms_residual": self.rms_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": [float(x) for x in self.trace],
        }
        if self.sigma2 is not None:
            d["sigma2"] = self.sigma2
        return d


# -- closed form ---------------------------------------------------------------

def umeyama_similarity(src, dst, with_scale: bool = True, weights=None) -> SimilarityTransform:
    """Least-squares transform mapping ``src`` points onto corresponding ``dst``.

    Umeyama (1991): centroid removal, SVD of the cross-covariance with a
    determinant correction against reflections, scale from the singular
    values. ``weights`` optionally weight each correspondence.
    """
    X = as_cloud(src).points
    Y = as_cloud(dst).points
    if len(X) != len(Y):
        raise InputError(f"point counts differ: {len(X)} vs {len(Y)}")
    if len(X) < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if not wsum > 0:
        raise DegenerateConfiguration("correspondence weights sum to zero")
    w = w / wsum
    mx = w @ X
    my = w @ Y
    Xc = X - mx
    Yc = Y - my
    var_x = float(w @ np.sum(Xc * Xc, axis=1))
    cov = (Yc * w[:, None]).T @ Xc
    U, D, Vt = np.linalg.svd(cov)
    sx = np.linalg.svd(Xc * np.sqrt(w)[:, None], compute_uv=False)
    if D[0] <= 0 or D[1] <= 1e-12 * D[0] or sx[1] <= 1e-12 * sx[0]:
        raise DegenerateConfiguration("cross-covariance has rank < 2 (collinear or coincident points)")
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    scale = float(np.dot(D, S) / var_x) if with_scale else 1.0
    if not scale > 0:
        raise DegenerateConfiguration("non-positive scale estimate")
    t = my - scale * (R @ mx)
    return SimilarityTransform(R, t, scale)


def rms_between(a, b) -> float:
    d = np.asarray(a) - np.asarray(b)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


# -- nearest neighbors ---------------------------------------------------------

def _canon_dist(q, r):
    d = q - r
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def nearest_neighbors_brute(query, reference):
    Q = as_cloud(query).points
    R = as_cloud(reference).points
    idx = np.empty(len(Q), dtype=np.int64)
    dist = np.empty(len(Q))
    rows = max(1, (1 << 22) // len(R))
    for s in range(0, len(Q), rows):
        d = _canon_dist(Q[s:s + rows, None, :], R[None, :, :])
        j = np.argmin(d, axis=1)
        idx[s:s + rows] = j
        dist[s:s + rows] = d[np.arange(len(j)), j]
    return idx, dist


class NeighborIndex:
    """Exact nearest-neighbor queries with smallest-index tie breaking.

    Candidates come from a KD-tree; distances are recomputed with the same
    formula as the brute-force oracle so both paths agree bit for bit.
    Queries whose candidate list is all ties fall back to brute force.
    """

    def __init__(self, reference, k: int = 8):
        self.ref = as_cloud(reference).points
        self.tree = cKDTree(self.ref)
        self.k = min(k, len(self.ref))

    def query(self, query):
        Q = as_cloud(query).points
        if self.k == 1:
            cand = np.zeros((len(Q), 1), dtype=np.int64)
        else:
            _, cand = self.tree.query(Q, k=self.k, workers=workers())
        d = _canon_dist(Q[:, None, :], self.ref[cand])
        dmin = d.min(axis=1)
        # among equal minima prefer the smallest reference index
        masked = np.where(d == dmin[:, None], cand, np.iinfo(np.int64).max)
        idx = masked.min(axis=1)
        if self.k < len(self.ref):
            ambiguous = np.flatnonzero(d.max(axis=1) <= dmin)
            if ambiguous.size:
                bi, bd = nearest_neighbors_brute(Q[ambiguous], self.ref)
                idx[ambiguous] = bi
                dmin[ambiguous] = bd
        return idx, dmin


def nearest_neighbors(query, reference):
    """Index and distance of the nearest reference point for every query point."""
    return NeighborIndex(reference).query(query)


# -- ICP -------------------------------------------------------------------------

def icp_rigid(src, dst, init: SimilarityTransform | None = None, max_iters: int = 100,
              tol: float = 1e-10) -> RegistrationReport:
    """Rigid iterative closest point; the returned scale is always exactly 1.

    The trace holds the RMS nearest-neighbor distance at each iterate,
    which cannot increase.
    """
    X = as_cloud(src).points
    Y = as_cloud(dst).points
    if len(X) < 3 or len(Y) < 3:
        raise DegenerateConfiguration("ICP needs at least 3 points per cloud")
    T = init or SimilarityTransform.identity()
    if T.scale != 1.0:
        raise InputError("ICP initial transform must be rigid (scale 1)")
    index = NeighborIndex(Y)
    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        idx, d = index.query(T.apply(X))
        rms = float(np.sqrt(np.mean(d * d)))
        trace.append(rms)
        if len(trace) > 1 and abs(trace[-2] - rms) < tol:
            converged = True
            break
        T = umeyama_similarity(X, Y[idx], with_scale=False)
    if not converged:
        _, d = index.query(T.apply(X))
        trace.append(float(np.sqrt(np.mean(d * d))))
    return RegistrationReport(T, trace[-1], it, converged, trace)


# -- CPD -------------------------------------------------------------------------

@dataclass
class _EStep:
    P: np.ndarray
    nll: float


def _sqdist(TY, X):
    """(M, N) squared distances, accumulated per axis (no BLAS, thread-count stable)."""
    d = np.subtract.outer(TY[:, 0], X[:, 0])
    out = d * d
    for k in (1, 2):
        np.subtract.outer(TY[:, k], X[:, k], out=d)
        d *= d
        out += d
    return out


def _cpd_estep(d2, wx, sigma2, w, log_uniform):
    M, N = d2.shape
    D = 3
    logk = d2 * (-0.5 / sigma2)
    m = logk.max(axis=0)
    K = np.exp(logk - m)
    lse = m + np.log(K.sum(axis=0))  # (N,)
    log_gauss = np.log(1.0 - w) - np.log(M) - 0.5 * D * np.log(2 * np.pi * sigma2) + lse
    if w > 0:
        log_px = np.logaddexp(log_gauss, np.log(w) + log_uniform)
        logc = np.log(w / (1 - w) * M) + log_uniform + 0.5 * D * np.log(2 * np.pi * sigma2)
        logden = np.logaddexp(lse, logc)
    else:
        log_px = log_gauss
        logden = lse
    P = K * (np.exp(m - logden) * wx)[None, :]
    return _EStep(P, float(-np.dot(wx, log_px)))


def _cpd_mstep(X, Y, P, with_scale):
    Np = P.sum()
    if not Np > 0:
        raise DegenerateConfiguration("CPD posterior mass vanished")
    Pt1 = P.sum(axis=0)
    P1 = P.sum(axis=1)
    mx = Pt1 @ X / Np
    my = P1 @ Y / Np
    Xc = X - mx
    Yc = Y - my
    A = Xc.T @ P.T @ Yc  # (D, D)
    U, S, Vt = np.linalg.svd(A)
    if S[0] <= 0 or S[1] <= 1e-12 * S[0]:
        raise DegenerateConfiguration("CPD cross-covariance has rank < 2")
    C = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        C[2] = -1.0
    R = (U * C) @ Vt
    tr_ar = float(np.dot(S, C))
    yy = float(P1 @ np.sum(Yc * Yc, axis=1))
    s = tr_ar / yy if with_scale else 1.0
    t = mx - s * (R @ my)
    return SimilarityTransform(R, t, s), Np


def _cpd_init(X, wx, Y, with_scale):
    wn = wx / wx.sum()
    cx = wn @ X
    cy = Y.mean(axis=0)
    s = 1.0
    if with_scale:
        rx = np.sqrt(wn @ np.sum((X - cx) ** 2, axis=1))
        ry = np.sqrt(np.mean(np.sum((Y - cy) ** 2, axis=1)))
        if ry > 0 and rx > 0:
            s = float(rx / ry)
    return SimilarityTransform(np.eye(3), cx - s * cy, s)


def _log_uniform_density(X, uniform):
    if uniform == "per_point":
        return -np.log(len(X))
    extent = np.ptp(X, axis=0)
    extent = np.maximum(extent, 1e-3 * max(extent.max(), 1e-9))
    return -float(np.sum(np.log(extent)))


def cpd_rigid(src, dst, with_scale: bool = True, outlier_w: float = 0.0, tol: float = 1e-8,
              max_iters: int = 150, init: SimilarityTransform | None = None,
              uniform: str = "bbox") -> RegistrationReport:
    """Rigid (optionally scaled) coherent point drift of ``src`` onto ``dst``.

    The Gaussian mixture is centered at the transformed ``src`` points; a
    uniform component of weight ``outlier_w`` absorbs stray ``dst`` points,
    and ``dst.weights`` (if any) weight the data terms. Starts from centroid
    alignment with identity rotation unless ``init`` is given. The trace is
    the negative log-likelihood at each iterate.
    """
    if not 0.0 <= outlier_w < 1.0:
        raise InputError("outlier_w must lie in [0, 1)")
    Yc = as_cloud(src)
    Xc = as_cloud(dst)
    Y, X = Yc.points, Xc.points
    if len(X) < 3 or len(Y) < 3:
        raise DegenerateConfiguration("CPD needs at least 3 points per cloud")
    wx = np.ones(len(X)) if Xc.weights is None else Xc.weights
    if not wx.sum() > 0:
        raise DegenerateConfiguration("dst weights sum to zero")

    # work in a frame centered on dst to keep magnitudes small
    shift = (wx / wx.sum()) @ X
    Xs = X - shift
    T = _cpd_init(X, wx, Y, with_scale) if init is None else init
    T = SimilarityTransform(T.rotation, T.translation - shift, T.scale)

    TY = T.apply(Y)
    d2 = _sqdist(TY, Xs)
    sigma2 = float(wx @ d2.sum(axis=0) / (3 * len(Y) * wx.sum()))
    if not sigma2 > SIGMA2_FLOOR:
        sigma2 = 1.0

    log_u = _log_uniform_density(Xs, uniform)
    trace: list[float] = []
    converged = False
    floored = False
    it = 0
    for it in range(1, max_iters + 1):
        est = _cpd_estep(d2, wx, sigma2, outlier_w, log_u)
        trace.append(est.nll)
        T_new, Np = _cpd_mstep(Xs, Y, est.P, with_scale)
        TY_new = T_new.apply(Y)
        d2_new = _sqdist(TY_new, Xs)
        sigma2_new = float(np.sum(est.P * d2_new) / (3.0 * Np))
        moved = rms_between(TY_new, TY)
        if not sigma2_new > SIGMA2_FLOOR:
            # clamping is still a generalized EM step (Q is unimodal in sigma^2);
            # exact overlaps get one clamped step to settle before we call it a collapse
            if moved < 1e-6 or floored:
                if moved >= 1e-6:
                    last = SimilarityTransform(T.rotation, T.translation + shift, T.scale)
                    raise NumericalCollapse(
                        f"sigma^2 fell below {SIGMA2_FLOOR:g} mm^2 at iteration {it}",
                        RegistrationReport(last, float("nan"), it, False, trace, sigma2),
                    )
                T, TY, d2, sigma2 = T_new, TY_new, d2_new, SIGMA2_FLOOR
                converged = True
                break
            floored = True
            sigma2_new = SIGMA2_FLOOR
        delta = abs(sigma2_new - sigma2)
        T, TY, d2, sigma2 = T_new, TY_new, d2_new, sigma2_new
        if delta < tol:
            converged = True
            break
    trace.append(_cpd_estep(d2, wx, sigma2, outlier_w, log_u).nll)

    T = SimilarityTransform(T.rotation, T.translation + shift, T.scale)
    _, nn = nearest_neighbors(T.apply(Y), X)
    return RegistrationReport(T, float(np.sqrt(np.mean(nn * nn))), it, converged, trace, sigma2)


# -- I/O -------------------------------------------------------------------------

def read_xyz(path) -> PointCloud:
    pts = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 3:
            raise InputError(f"{path}:{lineno}: expected 'x y z'")
        pts.append([float(x) for x in parts])
    return PointCloud(np.array(pts))


def write_xyz(cloud, path) -> None:
    pts = as_cloud(cloud).points
    Path(path).write_text("".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts))
