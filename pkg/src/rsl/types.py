"""Core geometric and semantic value types shared across the pipeline.

Conventions: angles are radians everywhere inside the library (degrees only
at CLI/file boundaries); poses are planar SE(2); clouds are numpy arrays and
are frozen after construction so they can be shared freely between workers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

TAU = 2.0 * math.pi


class SemanticClass(enum.IntEnum):
    """Four-way label scheme; NOISE is the catch-all (pedestrians map here)."""

    NOISE = 0
    VEHICLE = 1
    VEGETATION = 2
    BUILDING = 3


#: Channel order of ClassRaster files (noise is never projected).
PROJECTED_CLASSES = (
    SemanticClass.BUILDING,
    SemanticClass.VEHICLE,
    SemanticClass.VEGETATION,
)


def wrap_angle(theta: float) -> float:
    """Normalize an angle into (-pi, pi]."""
    t = math.remainder(theta, TAU)
    if t <= -math.pi:
        t += TAU
    return t


@dataclass(frozen=True)
class Point3:
    """Single LiDAR return: position in meters plus unitless reflectance."""

    x: float
    y: float
    z: float
    intensity: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError("Point3 coordinates must be finite")
        if self.intensity < 0:
            raise ValueError("intensity must be >= 0")

    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LabeledCloud:
    """Point cloud with a parallel per-point semantic label.

    points: (N, 4) float32 columns x, y, z, intensity (meters / unitless)
    labels: (N,) uint8 SemanticClass values

    Filtering operations preserve the relative order of surviving points.
    """

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        lab = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(pts) != len(lab):
            raise ValueError(f"points ({len(pts)}) and labels ({len(lab)}) differ in length")
        if not np.all(np.isfinite(pts[:, :3])):
            raise ValueError("point coordinates must be finite")
        if lab.size and lab.max() > max(SemanticClass):
            raise ValueError(f"label id {int(lab.max())} outside SemanticClass range")
        object.__setattr__(self, "points", _freeze(pts))
        object.__setattr__(self, "labels", _freeze(lab))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        """(N, 3) float32 view of the coordinates."""
        return self.points[:, :3]

    def point(self, i: int) -> Point3:
        x, y, z, inten = self.points[i]
        return Point3(float(x), float(y), float(z), float(inten))

    def select(self, mask_or_index) -> "LabeledCloud":
        """Subset keeping relative order; accepts a bool mask or index array."""
        return LabeledCloud(self.points[mask_or_index], self.labels[mask_or_index])

    def with_labels(self, labels: np.ndarray) -> "LabeledCloud":
        return LabeledCloud(self.points, labels)

    def class_mask(self, cls: SemanticClass) -> np.ndarray:
        return self.labels == int(cls)

    @staticmethod
    def empty() -> "LabeledCloud":
        return LabeledCloud(np.zeros((0, 4), np.float32), np.zeros(0, np.uint8))


@dataclass(frozen=True)
class Pose2:
    """Planar pose (x, y in meters, theta radians in (-pi, pi])."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @staticmethod
    def identity() -> "Pose2":
        return Pose2(0.0, 0.0, 0.0)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


def se2_compose(a: Pose2, b: Pose2) -> Pose2:
    """Standard SE(2) composition a * b with theta renormalized."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def se2_inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.theta)


def se2_apply(p: Pose2, pt) -> np.ndarray:
    """Apply R(theta) @ pt + t to a single 2-D point."""
    pt = np.asarray(pt, dtype=np.float64)
    return p.rotation() @ pt + p.translation()


def se2_apply_many(p: Pose2, pts: np.ndarray) -> np.ndarray:
    """Vectorized se2_apply for an (N, 2) array."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return pts @ p.rotation().T + p.translation()


def se2_delta(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose a^-1 * b (b expressed in the frame of a)."""
    return se2_compose(se2_inverse(a), b)


@dataclass(frozen=True)
class PolarScan:
    """Azimuth x range radar power image.

    power: (A, R) float32, finite, >= 0; row a covers azimuth [2*pi*a/A, 2*pi*(a+1)/A)
    range_resolution: meters per range bin
    """

    power: np.ndarray
    range_resolution: float
    timestamp: float = 0.0

    def __post_init__(self):
        pw = np.asarray(self.power, dtype=np.float32)
        if pw.ndim != 2 or pw.shape[0] < 1 or pw.shape[1] < 1:
            raise ValueError("power must be a non-empty 2-D A x R grid")
        if not np.all(np.isfinite(pw)) or pw.min() < 0:
            raise ValueError("power values must be finite and >= 0")
        if self.range_resolution <= 0:
            raise ValueError("range_resolution must be positive")
        object.__setattr__(self, "power", _freeze(pw))
        object.__setattr__(self, "range_resolution", float(self.range_resolution))
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @property
    def azimuth_bins(self) -> int:
        return self.power.shape[0]

    @property
    def range_bins(self) -> int:
        return self.power.shape[1]


@dataclass(frozen=True)
class ClassRaster:
    """Per-class binary occupancy on the radar polar grid.

    channels: (3, A, R) bool in PROJECTED_CLASSES order (building, vehicle,
    vegetation). Channels are independent; overlap between classes is allowed.
    """

    channels: np.ndarray
    range_resolution: float
    timestamp: float = 0.0

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.ndim != 3 or ch.shape[0] != 3:
            raise ValueError("channels must have shape (3, A, R)")
        ch = ch.astype(bool)
        if self.range_resolution <= 0:
            raise ValueError("range_resolution must be positive")
        object.__setattr__(self, "channels", _freeze(ch))
        object.__setattr__(self, "range_resolution", float(self.range_resolution))
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @property
    def azimuth_bins(self) -> int:
        return self.channels.shape[1]

    @property
    def range_bins(self) -> int:
        return self.channels.shape[2]

    def channel(self, cls: SemanticClass) -> np.ndarray:
        """(A, R) bool occupancy of one projected class."""
        return self.channels[PROJECTED_CLASSES.index(cls)]

    @staticmethod
    def empty(azimuth_bins: int, range_bins: int, range_resolution: float,
              timestamp: float = 0.0) -> "ClassRaster":
        return ClassRaster(np.zeros((3, azimuth_bins, range_bins), bool),
                           range_resolution, timestamp)


@dataclass(frozen=True)
class Trajectory:
    """Timestamped planar poses; timestamps strictly increasing."""

    timestamps: np.ndarray
    poses: np.ndarray  # (N, 3) columns x, y, theta

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        ps = np.asarray(self.poses, dtype=np.float64).reshape(-1, 3)
        if len(ts) != len(ps):
            raise ValueError("timestamps and poses differ in length")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", _freeze(ts))
        object.__setattr__(self, "poses", _freeze(ps))

    def __len__(self) -> int:
        return len(self.timestamps)

    def pose(self, i: int) -> Pose2:
        x, y, t = self.poses[i]
        return Pose2(x, y, t)

    @staticmethod
    def from_poses(timestamps, poses: "list[Pose2]") -> "Trajectory":
        arr = np.array([[p.x, p.y, p.theta] for p in poses], dtype=np.float64).reshape(-1, 3)
        return Trajectory(np.asarray(timestamps, dtype=np.float64), arr)
