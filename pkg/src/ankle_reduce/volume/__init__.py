"""Scalar volumes: gradients, sampling, voxelization and NIfTI-1 I/O."""
from .grid import GridSpec, Volume3, gaussian_blur, gradient_magnitude, sample_trilinear
from .nifti import read_nifti, write_nifti
from .voxelize import voxelize, winding_grid

__all__ = [
    "GridSpec",
    "Volume3",
    "gaussian_blur",
    "gradient_magnitude",
    "read_nifti",
    "sample_trilinear",
    "voxelize",
    "winding_grid",
    "write_nifti",
]
