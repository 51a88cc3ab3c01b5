"""Meshes, transforms, mirroring and surface-distance metrics."""
from .distance import (
    ClosestPoints,
    MeshIndex,
    SurfaceDistanceStats,
    closest_point_on_triangles,
    closest_points,
    closest_points_brute,
    inside_mesh,
    surface_distance,
    winding_numbers,
)
from .mesh import (
    TriangleMesh,
    apply_transform,
    box,
    centroid,
    edge_use_counts,
    face_areas,
    face_normals,
    icosphere,
    icosphere_level_for,
    is_closed,
    merge,
    mirror,
    signed_volume,
    vertex_normals,
)
from .obj import read_obj, write_obj
from .transform import (
    MirrorPlane,
    SimilarityTransform,
    compose,
    invert,
    rotation_about,
    rotation_angle_deg,
)

__all__ = [name for name in dir() if not name.startswith("_")]
