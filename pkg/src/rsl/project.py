"""Projection of labeled clouds onto the radar's polar grid.

Bin convention (pure floor): azimuth bin a spans [2*pi*a/A, 2*pi*(a+1)/A),
range bin r spans [r*res, (r+1)*res); azimuth exactly 2*pi wraps to bin 0.
Points outside the range extent are dropped; the height axis is discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import (TAU, ClassRaster, LabeledCloud, PROJECTED_CLASSES,
                    SemanticClass, se2_apply_many)


@dataclass(frozen=True)
class GridSpec:
    """Polar grid geometry; must match the paired radar scan exactly."""

    azimuth_bins: int
    range_bins: int
    range_resolution: float

    def __post_init__(self):
        if self.azimuth_bins < 1 or self.range_bins < 1:
            raise ValueError("grid needs at least one azimuth and range bin")
        if self.range_resolution <= 0:
            raise ValueError("range_resolution must be positive")

    @staticmethod
    def of(scan) -> "GridSpec":
        """Grid of a PolarScan or ClassRaster."""
        return GridSpec(scan.azimuth_bins, scan.range_bins, scan.range_resolution)

    def matches(self, scan) -> bool:
        return self == GridSpec.of(scan)

    @property
    def max_range(self) -> float:
        return self.range_bins * self.range_resolution


@dataclass(frozen=True)
class WindowSpec:
    """Sliding accumulation window around a reference frame.

    relative_poses[i] maps neighbor frame i's coordinates into the reference
    frame (one pose per neighbor, past frames first).
    """

    frames_before: int
    frames_after: int
    relative_poses: tuple

    def __post_init__(self):
        poses = tuple(self.relative_poses)
        if len(poses) != self.frames_before + self.frames_after:
            raise ValueError("need one relative pose per neighbor frame")
        object.__setattr__(self, "relative_poses", poses)


def polar_bins(xy: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map planar points to (azimuth bin, range bin, in-extent mask)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    planar = np.hypot(xy[:, 0], xy[:, 1])
    azimuth = np.mod(np.arctan2(xy[:, 1], xy[:, 0]), TAU)
    a = np.floor(azimuth / TAU * grid.azimuth_bins).astype(np.int64) % grid.azimuth_bins
    r = np.floor(planar / grid.range_resolution).astype(np.int64)
    return a, r, r < grid.range_bins


def bin_center_xy(a: np.ndarray, r: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Cartesian coordinates of bin centers, the inverse of polar_bins."""
    azimuth = (np.asarray(a, dtype=np.float64) + 0.5) * TAU / grid.azimuth_bins
    rng = (np.asarray(r, dtype=np.float64) + 0.5) * grid.range_resolution
    return np.column_stack([rng * np.cos(azimuth), rng * np.sin(azimuth)])


def rasterize_class(cloud: LabeledCloud, cls: SemanticClass, grid: GridSpec) -> np.ndarray:
    """Binary (A, R) occupancy of one non-noise class."""
    if cls == SemanticClass.NOISE:
        raise ValueError("noise is never projected as supervision")
    out = np.zeros((grid.azimuth_bins, grid.range_bins), dtype=bool)
    sel = cloud.class_mask(cls)
    if not sel.any():
        return out
    a, r, ok = polar_bins(cloud.points[sel][:, :2], grid)
    out[a[ok], r[ok]] = True
    return out


def project_all(cloud: LabeledCloud, grid: GridSpec, timestamp: float = 0.0) -> ClassRaster:
    """Three independent channels (building, vehicle, vegetation)."""
    channels = np.stack([rasterize_class(cloud, cls, grid) for cls in PROJECTED_CLASSES])
    return ClassRaster(channels, grid.range_resolution, timestamp)


def accumulate_window(reference: ClassRaster, neighbors: list[ClassRaster],
                      window: WindowSpec, grid: GridSpec) -> ClassRaster:
    """OR neighbor rasters into the reference frame.

    Occupied neighbor cells move polar -> Cartesian (bin centers) -> SE(2)
    -> polar with nearest-cell assignment; labels are categorical so there
    is no interpolation. Monotone: reference cells stay set.
    """
    if len(neighbors) != len(window.relative_poses):
        raise ValueError(f"{len(neighbors)} neighbor rasters but "
                         f"{len(window.relative_poses)} relative poses")
    if not grid.matches(reference):
        raise ValueError("reference raster grid differs from the declared grid")
    out = reference.channels.copy()
    for raster, pose in zip(neighbors, window.relative_poses):
        if not grid.matches(raster):
            raise ValueError("neighbor raster grid differs from the declared grid")
        for ch in range(3):
            a, r = np.nonzero(raster.channels[ch])
            if len(a) == 0:
                continue
            moved = se2_apply_many(pose, bin_center_xy(a, r, grid))
            na, nr, ok = polar_bins(moved, grid)
            out[ch][na[ok], nr[ok]] = True
    return ClassRaster(out, reference.range_resolution, reference.timestamp)
