"""Radar-side point extraction, semantic masking, and image comparison."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .project import GridSpec, bin_center_xy
from .types import ClassRaster, PolarScan, SemanticClass


class MaskMode(enum.Enum):
    NONE_REMOVED = "none-removed"
    VEHICLE_REMOVED = "vehicle-removed"
    ONLY_BUILDING = "only-building"


@dataclass(frozen=True)
class RadarPointSet:
    """Points extracted from a polar scan.

    Parallel arrays: azimuth_bin, range_bin (int), power (float), xy (N, 2)
    meters at the bin centers, consistent with the grid. classes is optional
    per-point semantics (uint8) once a mask/raster has assigned them.
    """

    grid: GridSpec
    azimuth_bin: np.ndarray
    range_bin: np.ndarray
    power: np.ndarray
    xy: np.ndarray
    classes: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.azimuth_bin, dtype=np.int64).reshape(-1)
        r = np.asarray(self.range_bin, dtype=np.int64).reshape(-1)
        p = np.asarray(self.power, dtype=np.float64).reshape(-1)
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if not (len(a) == len(r) == len(p) == len(xy)):
            raise ValueError("point arrays differ in length")
        expected = bin_center_xy(a, r, self.grid)
        if len(a) and np.abs(expected - xy).max() > 1e-6:
            raise ValueError("xy inconsistent with bin centers beyond 1e-6 m")
        for name, arr in (("azimuth_bin", a), ("range_bin", r), ("power", p), ("xy", xy)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.classes is not None:
            c = np.asarray(self.classes, dtype=np.uint8).reshape(-1)
            if len(c) != len(a):
                raise ValueError("classes length mismatch")
            c.flags.writeable = False
            object.__setattr__(self, "classes", c)

    def __len__(self) -> int:
        return len(self.azimuth_bin)

    @staticmethod
    def from_bins(grid: GridSpec, azimuth_bin, range_bin, power) -> "RadarPointSet":
        a = np.asarray(azimuth_bin, dtype=np.int64).reshape(-1)
        r = np.asarray(range_bin, dtype=np.int64).reshape(-1)
        return RadarPointSet(grid, a, r, power, bin_center_xy(a, r, grid))

    def select(self, mask: np.ndarray) -> "RadarPointSet":
        return RadarPointSet(
            self.grid, self.azimuth_bin[mask], self.range_bin[mask],
            self.power[mask], self.xy[mask],
            None if self.classes is None else self.classes[mask])


def k_strongest(scan: PolarScan, k: int, min_power: float = 0.0) -> RadarPointSet:
    """Per azimuth row, the k highest-power bins with power strictly above
    min_power; ties broken toward the smaller range bin. Rows may contribute
    fewer than k points."""
    if k < 1:
        raise ValueError("k must be >= 1")
    power = scan.power
    a_rows, r_cols = [], []
    for a in range(scan.azimuth_bins):
        row = power[a]
        eligible = np.flatnonzero(row > min_power)
        if len(eligible) == 0:
            continue
        # sort by (-power, range bin): lexsort keys are last-key dominant
        order = np.lexsort((eligible, -row[eligible]))[:k]
        chosen = eligible[order]
        a_rows.append(np.full(len(chosen), a, dtype=np.int64))
        r_cols.append(chosen)
    if not a_rows:
        empty = np.zeros(0, dtype=np.int64)
        return RadarPointSet.from_bins(GridSpec.of(scan), empty, empty, np.zeros(0))
    a_all = np.concatenate(a_rows)
    r_all = np.concatenate(r_cols)
    return RadarPointSet.from_bins(GridSpec.of(scan), a_all, r_all,
                                   power[a_all, r_all].astype(np.float64))


def dilate_channel(channel: np.ndarray, cells: int) -> np.ndarray:
    """Chebyshev dilation by `cells`; azimuth wraps, range is clipped."""
    if cells <= 0:
        return channel.astype(bool)
    out = np.zeros_like(channel, dtype=bool)
    for da in range(-cells, cells + 1):
        rolled = np.roll(channel, da, axis=0)
        for dr in range(-cells, cells + 1):
            shifted = np.zeros_like(rolled)
            if dr >= 0:
                shifted[:, dr:] = rolled[:, :channel.shape[1] - dr]
            else:
                shifted[:, :dr] = rolled[:, -dr:]
            out |= shifted
    return out


def apply_semantic_mask(points: RadarPointSet, raster: ClassRaster,
                        mode: MaskMode, dilation: int = 1) -> RadarPointSet:
    """Filter radar points by the class raster.

    NONE_REMOVED passes everything through; VEHICLE_REMOVED drops points in
    (dilated) vehicle cells; ONLY_BUILDING keeps points in (dilated) building
    cells. Dilation absorbs single-cell misalignment at class borders.
    """
    if not points.grid.matches(raster):
        raise ValueError(f"raster grid {GridSpec.of(raster)} != point grid {points.grid}")
    if mode == MaskMode.NONE_REMOVED:
        return points
    if mode == MaskMode.VEHICLE_REMOVED:
        vehicle = dilate_channel(raster.channel(SemanticClass.VEHICLE), dilation)
        keep = ~vehicle[points.azimuth_bin, points.range_bin]
    else:
        building = dilate_channel(raster.channel(SemanticClass.BUILDING), dilation)
        keep = building[points.azimuth_bin, points.range_bin]
    return points.select(keep)


def mse(img1: PolarScan, img2: PolarScan) -> float:
    """Mean of squared pixel differences between two equal-size scans."""
    if img1.power.shape != img2.power.shape:
        raise ValueError(f"image dimensions differ: {img1.power.shape} vs {img2.power.shape}")
    diff = img1.power.astype(np.float64) - img2.power.astype(np.float64)
    return float(np.mean(diff * diff))
