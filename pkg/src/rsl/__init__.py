"""Radar semantic localization toolkit.

LiDAR label refinement to radar-grid supervision rasters, semantic radar
odometry, and OpenStreetMap building-footprint localization, plus the seeded
synthetic worlds and metrics used to validate all of it.
"""

from .types import (ClassRaster, LabeledCloud, Point3, PolarScan, Pose2,
                    PROJECTED_CLASSES, SemanticClass, Trajectory, se2_apply,
                    se2_apply_many, se2_compose, se2_delta, se2_inverse,
                    wrap_angle)

__version__ = "0.1.0"

__all__ = [
    "ClassRaster", "LabeledCloud", "Point3", "PolarScan", "Pose2",
    "PROJECTED_CLASSES", "SemanticClass", "Trajectory", "se2_apply",
    "se2_apply_many", "se2_compose", "se2_delta", "se2_inverse", "wrap_angle",
    "__version__",
]
