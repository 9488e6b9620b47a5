"""Readers/writers for the shared polar scan (.psc) and class raster (.crs)
file formats. These are the only interface to the data-producing pipeline:
row-major little-endian binaries with a JSON sidecar at <file>.json.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHANNEL_NAMES = ["building", "vehicle", "vegetation"]


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    azimuth_bins: int
    range_bins: int
    range_resolution_m: float

    def __str__(self):
        return f"{self.azimuth_bins}x{self.range_bins}@{self.range_resolution_m}m"


def _sidecar(path) -> dict:
    side = Path(str(path) + ".json")
    if not side.exists():
        raise FormatError(f"missing sidecar {side}")
    return json.loads(side.read_text())


def read_polar_scan(path) -> tuple[np.ndarray, Grid, float]:
    """Power image (A, R) float32, its grid, and the timestamp."""
    meta = _sidecar(path)
    grid = Grid(int(meta["azimuth_bins"]), int(meta["range_bins"]),
                float(meta["range_resolution_m"]))
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size != grid.azimuth_bins * grid.range_bins:
        raise FormatError(f"{path}: {raw.size} values, sidecar says {grid}")
    return raw.reshape(grid.azimuth_bins, grid.range_bins).copy(), grid, \
        float(meta.get("timestamp_s", 0.0))


def read_class_raster(path) -> tuple[np.ndarray, Grid, float]:
    """Occupancy channels (3, A, R) bool, grid, timestamp."""
    meta = _sidecar(path)
    if meta.get("channels") != CHANNEL_NAMES:
        raise FormatError(f"{path}: unexpected channels {meta.get('channels')}")
    grid = Grid(int(meta["azimuth_bins"]), int(meta["range_bins"]),
                float(meta["range_resolution_m"]))
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size != 3 * grid.azimuth_bins * grid.range_bins:
        raise FormatError(f"{path}: {raw.size} bytes, sidecar says 3x{grid}")
    return (raw.reshape(3, grid.azimuth_bins, grid.range_bins) != 0), grid, \
        float(meta.get("timestamp_s", 0.0))


def write_class_raster(path, channels: np.ndarray, grid: Grid,
                       timestamp: float = 0.0) -> None:
    channels = np.asarray(channels)
    if channels.shape != (3, grid.azimuth_bins, grid.range_bins):
        raise FormatError(f"channel shape {channels.shape} does not match {grid}")
    Path(path).write_bytes(channels.astype(np.uint8).tobytes())
    Path(str(path) + ".json").write_text(json.dumps({
        "azimuth_bins": grid.azimuth_bins,
        "range_bins": grid.range_bins,
        "range_resolution_m": grid.range_resolution_m,
        "timestamp_s": timestamp,
        "channels": CHANNEL_NAMES,
    }, sort_keys=True) + "\n")
