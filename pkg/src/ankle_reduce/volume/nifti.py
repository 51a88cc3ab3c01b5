"""Single-file NIfTI-1 (``.nii``) reader and writer.

Geometry is carried in the sform rows (``direction @ diag(spacing)`` and
the origin), so the world position of every voxel survives a roundtrip.
A matching qform is written as well for tools that prefer it.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagic, DimensionError, InputError, UnsupportedDatatype
from .grid import GridSpec, Volume3

HEADER_SIZE = 348
VOX_OFFSET = 352

# datatype code -> (numpy dtype, bitpix)
DATATYPES = {
    4: (np.dtype("int16"), 16),
    16: (np.dtype("float32"), 32),
}


def _rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (a, b, c, d) with a >= 0 for a proper rotation."""
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def _quaternion_to_rotation(b, c, d) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0 else 0.0
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])


def write_nifti(v: Volume3, path) -> None:
    """Write ``v``; int16 data stays int16, anything else is stored as float32."""
    data = v.data
    if data.dtype == np.int16:
        code = 4
    else:
        code = 16
        data = data.astype(np.float32)
    dtype, bitpix = DATATYPES[code]
    g = v.grid
    A = g.direction * g.spacing

    D = g.direction.copy()
    qfac = 1.0
    if np.linalg.det(D) < 0:
        qfac = -1.0
        D[:, 2] *= -1
    q = _rotation_to_quaternion(D)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *g.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, qfac, *g.spacing, 0, 0, 0, 0)
    struct.pack_into("<fff", hdr, 108, VOX_OFFSET, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 1, 1)  # qform_code, sform_code
    struct.pack_into("<6f", hdr, 256, q[1], q[2], q[3], *g.origin)
    for r in range(3):
        struct.pack_into("<4f", hdr, 280 + 16 * r, A[r, 0], A[r, 1], A[r, 2], g.origin[r])
    hdr[344:348] = b"n+1\0"

    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\0" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(np.asarray(data, dtype=dtype.newbyteorder("<")).tobytes(order="F"))


def read_nifti(path) -> Volume3:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise InputError(f"{path}: file too short for a NIfTI-1 header")
    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        e = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        e = ">"
    else:
        raise InputError(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\0":
        raise BadMagic(f"{path}: magic {magic!r} is not single-file NIfTI-1 'n+1\\0'")
    dim = struct.unpack_from(e + "8h", raw, 40)
    if dim[0] != 3:
        raise DimensionError(f"{path}: {dim[0]}-dimensional volumes are not supported")
    dims = tuple(int(x) for x in dim[1:4])
    code, _bitpix = struct.unpack_from(e + "hh", raw, 70)
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {code} (supported: 4 int16, 16 float32)")
    pixdim = struct.unpack_from(e + "8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from(e + "fff", raw, 108)
    qform_code, sform_code = struct.unpack_from(e + "hh", raw, 252)

    if sform_code > 0:
        rows = np.array([struct.unpack_from(e + "4f", raw, 280 + 16 * r) for r in range(3)], dtype=np.float64)
        A = rows[:, :3]
        origin = rows[:, 3]
        spacing = np.linalg.norm(A, axis=0)
        direction = A / spacing
    elif qform_code > 0:
        b, c, d, ox, oy, oz = struct.unpack_from(e + "6f", raw, 256)
        R = _quaternion_to_rotation(b, c, d)
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        R[:, 2] *= qfac
        spacing = np.abs(np.array(pixdim[1:4], dtype=np.float64))
        direction = R
        origin = np.array([ox, oy, oz], dtype=np.float64)
    else:
        spacing = np.abs(np.array(pixdim[1:4], dtype=np.float64))
        direction = np.eye(3)
        origin = np.zeros(3)

    dtype = DATATYPES[code][0].newbyteorder(e)
    start = int(vox_offset)
    n = int(np.prod(dims))
    if start < VOX_OFFSET or len(raw) < start + n * dtype.itemsize:
        raise InputError(f"{path}: truncated voxel data")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=start).reshape(dims, order="F")
    data = data.astype(DATATYPES[code][0])
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    return Volume3(data, GridSpec(dims, spacing, origin, direction))
