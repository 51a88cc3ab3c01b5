"""Inside/outside rasterization of closed triangle meshes."""
from __future__ import annotations

import numpy as np

from ..errors import OpenMesh
from ..geometry import TriangleMesh, is_closed
from .grid import GridSpec, Volume3

# ray offset in index units; keeps rays off mesh edges and vertices that sit
# exactly on voxel-center columns
_RAY_DX = 3.1415926535e-7
_RAY_DY = 2.7182818284e-7


def winding_grid(mesh: TriangleMesh, grid: GridSpec) -> np.ndarray:
    """Integer winding number of every voxel center, via +k ray crossings.

    Each triangle crossing the ray of column ``(i, j)`` at height ``z``
    adds its orientation sign to all voxels ``k < z``.
    """
    nx, ny, nz = grid.dims
    P = grid.world_to_index(mesh.vertices)
    tri = P[mesh.faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    orient = 1 if np.linalg.det(grid.direction) > 0 else -1

    lo = np.floor(tri[:, :, :2].min(axis=1) - [_RAY_DX, _RAY_DY]).astype(np.int64) + 1
    hi = np.floor(tri[:, :, :2].max(axis=1) - [_RAY_DX, _RAY_DY]).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [nx - 1, ny - 1])
    ni = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    nj = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    cnt = np.where(area2 != 0, ni * nj, 0)
    events = np.zeros((nx, ny, nz), dtype=np.int64)
    total = int(cnt.sum())
    if total == 0:
        return events

    t = np.repeat(np.arange(len(tri)), cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    local = np.arange(total) - start
    nj_t = nj[t]
    ci = lo[t, 0] + local // nj_t
    cj = lo[t, 1] + local % nj_t
    px = ci + _RAY_DX
    py = cj + _RAY_DY

    ax, ay, az = a[t, 0], a[t, 1], a[t, 2]
    bx, by, bz = b[t, 0], b[t, 1], b[t, 2]
    cx, cy, cz = c[t, 0], c[t, 1], c[t, 2]
    ar = area2[t]
    la = ((cx - bx) * (py - by) - (cy - by) * (px - bx)) / ar
    lb = ((ax - cx) * (py - cy) - (ay - cy) * (px - cx)) / ar
    lc = ((bx - ax) * (py - ay) - (by - ay) * (px - ax)) / ar
    hit = (la > 0) & (lb > 0) & (lc > 0)
    z = la * az + lb * bz + lc * cz
    k = np.ceil(z).astype(np.int64) - 1
    hit &= k >= 0
    k = np.minimum(k, nz - 1)
    sign = np.where(ar > 0, orient, -orient)
    np.add.at(events, (ci[hit], cj[hit], k[hit]), sign[hit])
    # winding(k) = sum of events at indices >= k
    return np.flip(np.cumsum(np.flip(events, axis=2), axis=2), axis=2)


def voxelize(mesh: TriangleMesh, grid: GridSpec, inside_value=1.0, outside_value=0.0,
             dtype=np.float32) -> Volume3:
    """Voxel centers inside the closed ``mesh`` get ``inside_value``."""
    if not is_closed(mesh):
        raise OpenMesh("voxelize requires a closed mesh (every edge shared by two faces)")
    inside = winding_grid(mesh, grid) > 0
    data = np.where(inside, inside_value, outside_value).astype(dtype)
    return Volume3(data, grid)
