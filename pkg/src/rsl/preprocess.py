"""LiDAR-side preparation: radar-frame alignment, ground removal, vertical
FOV gating and consolidation of fine-grained labels to the four-class scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .types import LabeledCloud, SemanticClass


@dataclass(frozen=True)
class Extrinsic:
    """Rigid LiDAR -> radar transform (3x3 rotation, translation in meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        if not math.isclose(float(np.linalg.det(r)), 1.0, abs_tol=1e-9):
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Extrinsic":
        return Extrinsic(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw_translation(yaw: float, translation) -> "Extrinsic":
        c, s = math.cos(yaw), math.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Extrinsic(r, np.asarray(translation, dtype=np.float64))


@dataclass(frozen=True)
class FovSpec:
    """Radar vertical half field of view plus range gate.

    The vertical half-angle has no library default: the sensor figure is
    deployment-specific and must come from config (reference configs ship
    0.9 degrees). The gate is symmetric about the horizontal plane.
    """

    half_angle: float  # radians
    min_range: float = 0.0
    max_range: float = math.inf

    def __post_init__(self):
        if not 0.0 < self.half_angle < math.pi / 2:
            raise ValueError("half_angle must be in (0, pi/2)")
        if not 0.0 <= self.min_range < self.max_range:
            raise ValueError("need 0 <= min_range < max_range")


@dataclass(frozen=True)
class LabelMap16to4:
    """Total map from upstream source label ids to the four-class scheme.

    Source ids are opaque strings (the upstream taxonomy is model-specific);
    the .lpc route uses decimal strings of the stored u8 ids.
    """

    table: dict

    def __post_init__(self):
        tab = {str(k): SemanticClass[v.upper()] if isinstance(v, str) else SemanticClass(v)
               for k, v in self.table.items()}
        object.__setattr__(self, "table", tab)

    def lookup(self, source_id: str) -> SemanticClass:
        key = str(source_id)
        if key not in self.table:
            raise KeyError(f"source label id {key!r} missing from label map")
        return self.table[key]


def align_to_radar(cloud: LabeledCloud, extrinsic: Extrinsic) -> LabeledCloud:
    """Transform every point into the radar frame; labels and order unchanged."""
    xyz = cloud.xyz.astype(np.float64) @ extrinsic.rotation.T + extrinsic.translation
    pts = np.column_stack([xyz.astype(np.float32), cloud.points[:, 3]])
    return LabeledCloud(pts, cloud.labels)


def ground_mask(points_xyz: np.ndarray, cell_size: float = 1.0,
                height_margin: float = 0.3) -> np.ndarray:
    """Boolean mask of ground points: within height_margin of the per-cell
    5th-percentile z over an (x, y) grid of cell_size meters.

    Stand-in for a full ground segmentation model; deterministic and adequate
    for near-flat scenes. Points with z > estimate + margin always survive.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    n = len(points_xyz)
    if n == 0:
        return np.zeros(0, dtype=bool)
    cells = np.floor(points_xyz[:, :2] / cell_size).astype(np.int64)
    _, inverse = np.unique(cells, axis=0, return_inverse=True)
    z = points_xyz[:, 2]
    order = np.argsort(inverse, kind="stable")
    bounds = np.flatnonzero(np.diff(inverse[order], prepend=-1))
    ground = np.empty(n)
    for start, stop in zip(bounds, np.append(bounds[1:], n)):
        idx = order[start:stop]
        ground[idx] = np.percentile(z[idx], 5.0)
    return z <= ground + height_margin


def remove_ground(cloud: LabeledCloud, cell_size: float = 1.0,
                  height_margin: float = 0.3) -> LabeledCloud:
    """Drop ground points (see ground_mask); order of survivors preserved."""
    if len(cloud) == 0:
        return cloud
    return cloud.select(~ground_mask(cloud.xyz, cell_size, height_margin))


def fov_retained_mask(points_xyz: np.ndarray, spec: FovSpec) -> np.ndarray:
    """Pointwise FOV predicate: |elevation| <= half_angle and planar range in
    [min_range, max_range]. Elevation is measured from the radar-frame origin."""
    planar = np.hypot(points_xyz[:, 0], points_xyz[:, 1])
    elevation = np.arctan2(points_xyz[:, 2], planar)
    return ((np.abs(elevation) <= spec.half_angle)
            & (planar >= spec.min_range) & (planar <= spec.max_range))


def fov_filter(cloud: LabeledCloud, spec: FovSpec) -> LabeledCloud:
    """Keep exactly the points the radar can see (cloud already radar-framed)."""
    if len(cloud) == 0:
        return cloud
    return cloud.select(fov_retained_mask(cloud.xyz.astype(np.float64), spec))


def consolidate_labels(points: np.ndarray, source_ids, label_map: LabelMap16to4) -> LabeledCloud:
    """Replace upstream source ids by their four-class consolidation.

    source_ids: sequence of opaque string ids (or ints, taken as decimal
    strings). Any unmapped id rejects the whole input, naming the id.
    """
    labels = np.empty(len(source_ids), dtype=np.uint8)
    for i, sid in enumerate(source_ids):
        labels[i] = int(label_map.lookup(sid))
    return LabeledCloud(np.asarray(points, dtype=np.float32).reshape(-1, 4), labels)
