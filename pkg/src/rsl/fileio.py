"""Readers/writers for the on-disk exchange formats.

Formats (all little-endian):
  .lpc  labeled point cloud: magic "LPC1", u32 count, then per point
        f32 x, y, z, intensity and u8 class id
  .psc  polar scan: row-major f32 A x R power grid, JSON sidecar <file>.json
        {azimuth_bins, range_bins, range_resolution_m, timestamp_s}
  .crs  class raster: three row-major u8 channels (building, vehicle,
        vegetation), same sidecar plus "channels"
  .csv  trajectory: header "timestamp_s,x_m,y_m,theta_rad"
        imu: header "timestamp_s,yaw_rate_rad_s"
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .types import ClassRaster, LabeledCloud, PolarScan, Trajectory

LPC_MAGIC = b"LPC1"
RASTER_CHANNEL_NAMES = ["building", "vehicle", "vegetation"]

_POINT_DTYPE = np.dtype([("xyzi", "<f4", 4), ("cls", "u1")])


class FileFormatError(ValueError):
    """Raised when an input file violates its declared format."""


def write_lpc_raw(path, points: np.ndarray, class_ids: np.ndarray) -> None:
    """Write a cloud with arbitrary u8 class ids (raw 16-way or 4-way)."""
    points = np.asarray(points, dtype=np.float32).reshape(-1, 4)
    ids = np.asarray(class_ids, dtype=np.uint8).reshape(-1)
    if len(points) != len(ids):
        raise ValueError("points and class ids differ in length")
    rec = np.empty(len(points), dtype=_POINT_DTYPE)
    rec["xyzi"] = points
    rec["cls"] = ids
    with open(path, "wb") as f:
        f.write(LPC_MAGIC)
        f.write(struct.pack("<I", len(points)))
        f.write(rec.tobytes())


def read_lpc_raw(path) -> tuple[np.ndarray, np.ndarray]:
    """Read points (N,4 f32) and class ids (N, u8) without range-checking ids."""
    data = Path(path).read_bytes()
    if data[:4] != LPC_MAGIC:
        raise FileFormatError(f"{path}: bad magic {data[:4]!r}, expected {LPC_MAGIC!r}")
    (count,) = struct.unpack_from("<I", data, 4)
    expected = 8 + count * _POINT_DTYPE.itemsize
    if len(data) != expected:
        raise FileFormatError(f"{path}: size {len(data)} != expected {expected} for {count} points")
    rec = np.frombuffer(data, dtype=_POINT_DTYPE, count=count, offset=8)
    return rec["xyzi"].reshape(-1, 4).copy(), rec["cls"].copy()


def write_cloud(path, cloud: LabeledCloud) -> None:
    write_lpc_raw(path, cloud.points, cloud.labels)


def read_cloud(path) -> LabeledCloud:
    points, ids = read_lpc_raw(path)
    if ids.size and ids.max() > 3:
        raise FileFormatError(
            f"{path}: class id {int(ids.max())} > 3; consolidate raw labels first")
    return LabeledCloud(points, ids)


def _sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def _write_sidecar(path, meta: dict) -> None:
    _sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def _read_sidecar(path) -> dict:
    side = _sidecar_path(path)
    if not side.exists():
        raise FileFormatError(f"missing JSON sidecar {side}")
    return json.loads(side.read_text())


def write_polar_scan(path, scan: PolarScan) -> None:
    Path(path).write_bytes(np.ascontiguousarray(scan.power, dtype="<f4").tobytes())
    _write_sidecar(path, {
        "azimuth_bins": scan.azimuth_bins,
        "range_bins": scan.range_bins,
        "range_resolution_m": scan.range_resolution,
        "timestamp_s": scan.timestamp,
    })


def read_polar_scan(path) -> PolarScan:
    meta = _read_sidecar(path)
    a, r = int(meta["azimuth_bins"]), int(meta["range_bins"])
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size != a * r:
        raise FileFormatError(f"{path}: {raw.size} values, sidecar says {a}x{r}")
    return PolarScan(raw.reshape(a, r), float(meta["range_resolution_m"]),
                     float(meta["timestamp_s"]))


def write_class_raster(path, raster: ClassRaster) -> None:
    Path(path).write_bytes(raster.channels.astype(np.uint8).tobytes())
    _write_sidecar(path, {
        "azimuth_bins": raster.azimuth_bins,
        "range_bins": raster.range_bins,
        "range_resolution_m": raster.range_resolution,
        "timestamp_s": raster.timestamp,
        "channels": RASTER_CHANNEL_NAMES,
    })


def read_class_raster(path) -> ClassRaster:
    meta = _read_sidecar(path)
    if meta.get("channels") != RASTER_CHANNEL_NAMES:
        raise FileFormatError(f"{path}: unexpected channel list {meta.get('channels')}")
    a, r = int(meta["azimuth_bins"]), int(meta["range_bins"])
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size != 3 * a * r:
        raise FileFormatError(f"{path}: {raw.size} bytes, sidecar says 3x{a}x{r}")
    return ClassRaster(raw.reshape(3, a, r) != 0, float(meta["range_resolution_m"]),
                       float(meta["timestamp_s"]))


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp_s", "x_m", "y_m", "theta_rad"])
        for t, (x, y, th) in zip(traj.timestamps, traj.poses):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y)), repr(float(th))])


def read_trajectory(path) -> Trajectory:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["timestamp_s", "x_m", "y_m", "theta_rad"]:
        raise FileFormatError(f"{path}: expected trajectory header, got {rows[:1]}")
    vals = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64)
    vals = vals.reshape(-1, 4)
    return Trajectory(vals[:, 0], vals[:, 1:])


def write_imu_csv(path, timestamps, yaw_rates) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp_s", "yaw_rate_rad_s"])
        for t, wz in zip(timestamps, yaw_rates):
            w.writerow([repr(float(t)), repr(float(wz))])


def read_imu_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["timestamp_s", "yaw_rate_rad_s"]:
        raise FileFormatError(f"{path}: expected IMU header, got {rows[:1]}")
    vals = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64)
    vals = vals.reshape(-1, 2)
    return vals[:, 0], vals[:, 1]
