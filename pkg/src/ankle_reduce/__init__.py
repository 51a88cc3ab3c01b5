"""Statistical shape models, coupled ASM fitting and fracture reduction planning.

Subpackages and modules:

- ``geometry``: triangle meshes, similarity transforms, mirroring, closest points
- ``volume``: scalar grids, gradients, voxelization, NIfTI-1 I/O
- ``pointreg``: Umeyama, ICP and rigid CPD registration
- ``shape_model``: Procrustes alignment and PCA point distribution models
- ``casm_fit``: coupled active shape model segmentation
- ``reduction``: contralateral-template reduction planning
- ``phantom``: synthetic populations, volumes and fractures with ground truth
- ``cli``: the ``ankle-reduce`` command
"""

__version__ = "0.1.0"
