"""Epipolar-supervised coarse-to-fine matching toolkit."""

__version__ = "0.1.0"

from . import errors
from .geometry import (
    Camera,
    CameraIntrinsics,
    EssentialMatrix,
    FundamentalMatrix,
    RelativePose,
    cross_matrix,
    decompose_essential,
    epipolar_line,
    epipolar_residual,
    essential_from_pose,
    fundamental_from_pose,
    fundamental_to_essential,
    normalize_point,
    point_line_distance,
    project,
    symmetric_epipolar_distance_sq,
    triangulate,
)

__all__ = [
    "errors",
    "Camera",
    "CameraIntrinsics",
    "EssentialMatrix",
    "FundamentalMatrix",
    "RelativePose",
    "cross_matrix",
    "decompose_essential",
    "epipolar_line",
    "epipolar_residual",
    "essential_from_pose",
    "fundamental_from_pose",
    "fundamental_to_essential",
    "normalize_point",
    "point_line_distance",
    "project",
    "symmetric_epipolar_distance_sq",
    "triangulate",
]
