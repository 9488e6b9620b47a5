"""Seeded synthetic scenes: desk-scale worlds of buildings, vegetation disks
and moving vehicles, with simulated LiDAR clouds (controllable label
corruption), simulated polar radar scans, ground-truth rasters, trajectories
and exact IMU yaw-rate streams.

Everything is a pure function of (spec, seed, frame): repeated calls are
bit-identical, which is what makes these scenes usable as test oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .project import GridSpec
from .types import (TAU, ClassRaster, LabeledCloud, PolarScan, Pose2,
                    SemanticClass, Trajectory, se2_apply_many, wrap_angle)
from .odom import ImuStream


@dataclass(frozen=True)
class BuildingSpec:
    center: tuple
    size: tuple          # footprint (sx, sy) meters
    height: float = 8.0
    yaw: float = 0.0

    def corners(self) -> np.ndarray:
        sx, sy = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[-sx, -sy], [sx, -sy], [sx, sy], [-sx, sy]])
        return se2_apply_many(Pose2(self.center[0], self.center[1], self.yaw), local)


@dataclass(frozen=True)
class VegetationSpec:
    center: tuple
    radius: float
    height: float = 6.0
    density: int = 150   # LiDAR points sampled per frame


@dataclass(frozen=True)
class VehicleSpec:
    center: tuple        # position at t = 0
    size: tuple = (4.5, 2.0)
    height: float = 1.6
    velocity: tuple = (0.0, 0.0)

    def center_at(self, t: float) -> np.ndarray:
        return np.array([self.center[0] + self.velocity[0] * t,
                         self.center[1] + self.velocity[1] * t])

    def corners_at(self, t: float) -> np.ndarray:
        cx, cy = self.center_at(t)
        yaw = math.atan2(self.velocity[1], self.velocity[0]) \
            if (self.velocity[0] or self.velocity[1]) else 0.0
        sx, sy = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[-sx, -sy], [sx, -sy], [sx, sy], [-sx, sy]])
        return se2_apply_many(Pose2(cx, cy, yaw), local)


@dataclass(frozen=True)
class SceneSpec:
    extent: float
    seed: int = 0
    buildings: tuple = ()
    vegetation: tuple = ()
    vehicles: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "buildings", tuple(self.buildings))
        object.__setattr__(self, "vegetation", tuple(self.vegetation))
        object.__setattr__(self, "vehicles", tuple(self.vehicles))

    def to_json(self) -> dict:
        return {
            "extent": self.extent,
            "seed": self.seed,
            "buildings": [{"center": list(b.center), "size": list(b.size),
                           "height": b.height, "yaw": b.yaw} for b in self.buildings],
            "vegetation": [{"center": list(v.center), "radius": v.radius,
                            "height": v.height, "density": v.density}
                           for v in self.vegetation],
            "vehicles": [{"center": list(v.center), "size": list(v.size),
                          "height": v.height, "velocity": list(v.velocity)}
                         for v in self.vehicles],
        }

    @staticmethod
    def from_json(doc: dict) -> "SceneSpec":
        return SceneSpec(
            extent=float(doc["extent"]),
            seed=int(doc.get("seed", 0)),
            buildings=tuple(BuildingSpec(tuple(b["center"]), tuple(b["size"]),
                                         float(b.get("height", 8.0)),
                                         float(b.get("yaw", 0.0)))
                            for b in doc.get("buildings", [])),
            vegetation=tuple(VegetationSpec(tuple(v["center"]), float(v["radius"]),
                                            float(v.get("height", 6.0)),
                                            int(v.get("density", 150)))
                             for v in doc.get("vegetation", [])),
            vehicles=tuple(VehicleSpec(tuple(v["center"]), tuple(v.get("size", (4.5, 2.0))),
                                       float(v.get("height", 1.6)),
                                       tuple(v.get("velocity", (0.0, 0.0))))
                           for v in doc.get("vehicles", [])),
        )


@dataclass(frozen=True)
class CorruptionSpec:
    """Independent per-point label flip probabilities."""

    building_to_vegetation_rate: float = 0.0
    vegetation_to_building_rate: float = 0.0

    def __post_init__(self):
        for p in (self.building_to_vegetation_rate, self.vegetation_to_building_rate):
            if not 0.0 <= p <= 1.0:
                raise ValueError("corruption rates must be probabilities")


@dataclass(frozen=True)
class LidarSpec:
    n_azimuth: int = 360
    max_range: float = 60.0
    points_per_column: int = 6
    range_noise: float = 0.02          # sigma, meters
    ground_points: int = 0             # random ground samples per frame
    ground_z_noise: float = 0.01
    min_point_z: float = 0.2


@dataclass(frozen=True)
class RadarNoiseSpec:
    noise_floor: float = 1.0           # exponential scale
    building_power: float = 60.0
    vehicle_power: float = 50.0
    vegetation_power: float = 14.0
    vegetation_depth_bins: tuple = (3, 6)
    vegetation_attenuation: float = 0.6
    smear: tuple = (0.25, 0.5, 0.25)   # triangular azimuth kernel
    range_noise: float = 0.08          # sigma of per-return range jitter, meters


def _rng(scene: SceneSpec, frame: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([scene.seed & 0x7FFFFFFF, frame, purpose])


def _scene_segments(scene: SceneSpec, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All opaque wall segments as (S,2) starts, (S,2) ends plus per-segment
    (class id, height) metadata packed as an (S,2) float array."""
    starts, ends, meta = [], [], []
    for b in scene.buildings:
        c = b.corners()
        for i in range(4):
            starts.append(c[i])
            ends.append(c[(i + 1) % 4])
            meta.append((float(SemanticClass.BUILDING), b.height))
    for v in scene.vehicles:
        c = v.corners_at(t)
        for i in range(4):
            starts.append(c[i])
            ends.append(c[(i + 1) % 4])
            meta.append((float(SemanticClass.VEHICLE), v.height))
    if not starts:
        z = np.zeros((0, 2))
        return z, z, z
    return np.array(starts), np.array(ends), np.array(meta)


def _ray_segment_hits(origin: np.ndarray, dirs: np.ndarray, seg_a: np.ndarray,
                      seg_b: np.ndarray) -> np.ndarray:
    """Distance along each ray to each segment (inf when missed): (A, S)."""
    n_rays, n_seg = len(dirs), len(seg_a)
    if n_seg == 0:
        return np.full((n_rays, 0), np.inf)
    d = dirs[:, None, :]                      # (A,1,2)
    e = (seg_b - seg_a)[None, :, :]           # (1,S,2)
    ao = (seg_a - origin)[None, :, :]         # (1,S,2)
    denom = d[..., 0] * (-e[..., 1]) - d[..., 1] * (-e[..., 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ray = (ao[..., 0] * (-e[..., 1]) - ao[..., 1] * (-e[..., 0])) / denom
        u = (d[..., 0] * ao[..., 1] - d[..., 1] * ao[..., 0]) / denom
    hit = (np.abs(denom) > 1e-12) & (t_ray > 1e-9) & (u >= 0.0) & (u <= 1.0)
    return np.where(hit, t_ray, np.inf)


def _ray_disk_entry(origin: np.ndarray, dirs: np.ndarray, centers: np.ndarray,
                    radii: np.ndarray) -> np.ndarray:
    """Distance along each ray to the entry point of each disk: (A, V)."""
    n_rays, n_disk = len(dirs), len(centers)
    if n_disk == 0:
        return np.full((n_rays, 0), np.inf)
    rel = centers[None, :, :] - origin       # (1,V,2)
    proj = np.sum(dirs[:, None, :] * rel, axis=2)          # (A,V)
    perp2 = np.sum(rel * rel, axis=2) - proj * proj
    r2 = radii[None, :] ** 2
    with np.errstate(invalid="ignore"):
        half = np.sqrt(np.maximum(r2 - perp2, 0.0))
    entry = proj - half
    ok = (perp2 < r2) & (entry > 1e-9)
    return np.where(ok, entry, np.inf)


def simulate_lidar(scene: SceneSpec, pose: Pose2, sensor: LidarSpec,
                   corruption: CorruptionSpec = CorruptionSpec(),
                   frame: int = 0, time: float = 0.0
                   ) -> tuple[LabeledCloud, np.ndarray]:
    """Render one LiDAR frame in the sensor frame.

    Returns (cloud with possibly corrupted labels, ground-truth label array).
    Buildings and vehicles yield vertical point columns at ray hits;
    vegetation disks yield volumetric canopy scatter; optional ground samples
    are labeled noise (the four-class scheme has no ground class).
    """
    rng = _rng(scene, frame, 1)
    origin = np.array([pose.x, pose.y])
    angles = pose.theta + TAU * np.arange(sensor.n_azimuth) / sensor.n_azimuth
    dirs = np.column_stack([np.cos(angles), np.sin(angles)])

    seg_a, seg_b, seg_meta = _scene_segments(scene, time)
    hits = _ray_segment_hits(origin, dirs, seg_a, seg_b)

    pts, labels = [], []
    if hits.size:
        nearest = np.argmin(hits, axis=1)
        dist = hits[np.arange(len(dirs)), nearest]
        for ray in np.flatnonzero(np.isfinite(dist) & (dist <= sensor.max_range)):
            seg = nearest[ray]
            cls, height = seg_meta[seg]
            n_col = sensor.points_per_column
            z = sensor.min_point_z + (np.arange(n_col) + 0.5) / n_col \
                * max(height - sensor.min_point_z, 0.1)
            r_noisy = dist[ray] + rng.normal(0.0, sensor.range_noise, n_col)
            xy = origin[None, :] + np.outer(r_noisy, dirs[ray])
            pts.append(np.column_stack([xy, z, np.full(n_col, 0.5)]))
            labels.append(np.full(n_col, int(cls), dtype=np.uint8))

    for veg in scene.vegetation:
        c = np.asarray(veg.center, dtype=np.float64)
        if float(np.linalg.norm(c - origin)) - veg.radius > sensor.max_range:
            continue
        n = veg.density
        rad = veg.radius * np.sqrt(rng.uniform(0, 1, n))
        ang = rng.uniform(0, TAU, n)
        xy = c[None, :] + np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
        z = rng.uniform(0.3 * veg.height, veg.height, n)
        pts.append(np.column_stack([xy, z, np.full(n, 0.3)]))
        labels.append(np.full(n, int(SemanticClass.VEGETATION), dtype=np.uint8))

    if sensor.ground_points:
        n = sensor.ground_points
        rad = sensor.max_range * np.sqrt(rng.uniform(0, 1, n))
        ang = rng.uniform(0, TAU, n)
        xy = origin[None, :] + np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
        z = rng.normal(0.0, sensor.ground_z_noise, n)
        pts.append(np.column_stack([xy, z, np.full(n, 0.1)]))
        labels.append(np.full(n, int(SemanticClass.NOISE), dtype=np.uint8))

    if not pts:
        return LabeledCloud.empty(), np.zeros(0, dtype=np.uint8)

    world = np.vstack(pts)
    true_labels = np.concatenate(labels)
    # into the sensor frame (planar pose; z unchanged)
    local_xy = se2_apply_many(Pose2(0, 0, -pose.theta), world[:, :2] - origin)
    cloud_pts = np.column_stack([local_xy, world[:, 2], world[:, 3]]).astype(np.float32)

    corrupted = true_labels.copy()
    flips = rng.uniform(0, 1, len(true_labels))
    b2v = (true_labels == SemanticClass.BUILDING) \
        & (flips < corruption.building_to_vegetation_rate)
    v2b = (true_labels == SemanticClass.VEGETATION) \
        & (flips < corruption.vegetation_to_building_rate)
    corrupted[b2v] = SemanticClass.VEGETATION
    corrupted[v2b] = SemanticClass.BUILDING
    return LabeledCloud(cloud_pts, corrupted), true_labels


def _radar_ray_returns(scene: SceneSpec, pose: Pose2, grid: GridSpec, time: float):
    """Geometric (class, azimuth bin, range distance) returns per azimuth."""
    origin = np.array([pose.x, pose.y])
    angles = pose.theta + TAU * (np.arange(grid.azimuth_bins) + 0.5) / grid.azimuth_bins
    dirs = np.column_stack([np.cos(angles), np.sin(angles)])
    seg_a, seg_b, seg_meta = _scene_segments(scene, time)
    hits = _ray_segment_hits(origin, dirs, seg_a, seg_b)
    veg_centers = np.array([v.center for v in scene.vegetation]).reshape(-1, 2)
    veg_radii = np.array([v.radius for v in scene.vegetation])
    veg_entry = _ray_disk_entry(origin, dirs, veg_centers, veg_radii)
    return hits, seg_meta, veg_entry


def simulate_radar(scene: SceneSpec, pose: Pose2, grid: GridSpec,
                   noise: RadarNoiseSpec = RadarNoiseSpec(),
                   frame: int = 0, time: float = 0.0,
                   timestamp: float | None = None) -> PolarScan:
    """Render one polar radar scan: surface power peaks azimuth-smeared with
    a 3-bin triangular kernel, diffuse multi-bin vegetation, exponential
    noise floor. Vegetation attenuates but does not occlude walls."""
    rng = _rng(scene, frame, 2)
    a_bins, r_bins = grid.azimuth_bins, grid.range_bins
    returns = np.zeros((a_bins, r_bins), dtype=np.float64)
    hits, seg_meta, veg_entry = _radar_ray_returns(scene, pose, grid, time)
    max_range = grid.max_range

    veg_blocked = np.zeros(a_bins, dtype=bool)
    if veg_entry.size:
        for a in range(a_bins):
            entries = veg_entry[a]
            near = np.flatnonzero(np.isfinite(entries) & (entries < max_range))
            for vi in near:
                depth = rng.integers(noise.vegetation_depth_bins[0],
                                     noise.vegetation_depth_bins[1] + 1)
                r0 = int(entries[vi] / grid.range_resolution)
                for rb in range(r0, min(r0 + depth, r_bins)):
                    returns[a, rb] = max(returns[a, rb],
                                         noise.vegetation_power * rng.uniform(0.5, 1.5))
                veg_blocked[a] = True

    if hits.size:
        nearest = np.argmin(hits, axis=1)
        dist = hits[np.arange(a_bins), nearest]
        ok = np.isfinite(dist) & (dist < max_range)
        jitter = rng.normal(0.0, noise.range_noise, a_bins)
        for a in np.flatnonzero(ok):
            cls = int(seg_meta[nearest[a], 0])
            power = noise.building_power if cls == SemanticClass.BUILDING \
                else noise.vehicle_power
            if veg_blocked[a] and veg_entry.size \
                    and np.any(veg_entry[a] < dist[a]):
                power *= noise.vegetation_attenuation
            rb = int(max(dist[a] + jitter[a], 0.0) / grid.range_resolution)
            if rb < r_bins:
                returns[a, rb] = max(returns[a, rb], power)

    if np.any(returns):
        k = np.asarray(noise.smear, dtype=np.float64)
        smeared = sum(w * np.roll(returns, s, axis=0)
                      for w, s in zip(k, (-1, 0, 1)))
        returns = np.maximum(returns * (k[1] / k.max()), smeared)

    floor = rng.exponential(noise.noise_floor, size=(a_bins, r_bins))
    power = np.maximum(returns, floor).astype(np.float32)
    ts = (frame * 1.0) if timestamp is None else timestamp
    return PolarScan(power, grid.range_resolution, ts)


def ground_truth_raster(scene: SceneSpec, pose: Pose2, grid: GridSpec,
                        time: float = 0.0, timestamp: float = 0.0) -> ClassRaster:
    """Crisp per-class occupancy of the geometric radar returns (no noise)."""
    channels = np.zeros((3, grid.azimuth_bins, grid.range_bins), dtype=bool)
    hits, seg_meta, veg_entry = _radar_ray_returns(scene, pose, grid, time)
    max_range = grid.max_range
    if hits.size:
        nearest = np.argmin(hits, axis=1)
        dist = hits[np.arange(grid.azimuth_bins), nearest]
        ok = np.isfinite(dist) & (dist < max_range)
        for a in np.flatnonzero(ok):
            cls = int(seg_meta[nearest[a], 0])
            rb = int(dist[a] / grid.range_resolution)
            ch = 0 if cls == SemanticClass.BUILDING else 1
            channels[ch, a, rb] = True
    if veg_entry.size:
        depth = int(round(np.mean(RadarNoiseSpec().vegetation_depth_bins)))
        for a in range(grid.azimuth_bins):
            entries = veg_entry[a]
            for vi in np.flatnonzero(np.isfinite(entries) & (entries < max_range)):
                r0 = int(entries[vi] / grid.range_resolution)
                channels[2, a, r0:min(r0 + depth + 1, grid.range_bins)] = True
    return ClassRaster(channels, grid.range_resolution, timestamp)


def make_street_scene(traj: Trajectory, seed: int = 0, spacing: float = 10.0,
                      offset_range: tuple = (7.0, 13.0), size: tuple = (6.0, 4.0),
                      oblique: float = 0.5, vegetation_every: float = 0.0,
                      vegetation_offset: float = 6.0, n_vehicles: int = 0,
                      vehicle_speed: float = 4.0, extent: float = 500.0) -> SceneSpec:
    """Buildings flanking a trajectory at staggered offsets and slightly
    oblique yaws (corners and facades constrain motion along the street),
    with optional roadside vegetation and vehicles driving the same street."""
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 17])
    dist = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(traj.poses[:, 0]),
                                                     np.diff(traj.poses[:, 1])))])
    total = dist[-1]

    def pose_at(s: float):
        i = min(int(np.searchsorted(dist, s)), len(traj) - 1)
        return traj.poses[i]

    buildings = []
    s = spacing / 2
    while s < total:
        x, y, th = pose_at(s)
        for side in (-1.0, 1.0):
            off = rng.uniform(*offset_range)
            cx = x - math.sin(th) * side * off
            cy = y + math.cos(th) * side * off
            yaw = th + rng.uniform(-oblique, oblique)
            buildings.append(BuildingSpec((cx, cy), size, 8.0, yaw=yaw))
        s += spacing

    vegetation = []
    if vegetation_every > 0:
        s = vegetation_every
        while s < total:
            x, y, th = pose_at(s)
            side = float(rng.choice([-1.0, 1.0]))
            cx = x - math.sin(th) * side * vegetation_offset
            cy = y + math.cos(th) * side * vegetation_offset
            vegetation.append(VegetationSpec((cx, cy), float(rng.uniform(1.5, 3.0)),
                                             height=float(rng.uniform(4.0, 7.0))))
            s += vegetation_every

    vehicles = []
    for _ in range(n_vehicles):
        x, y, th = pose_at(float(rng.uniform(0.1, 0.9) * total))
        lane = float(rng.choice([-3.5, 3.5]))
        cx = x - math.sin(th) * lane
        cy = y + math.cos(th) * lane
        direction = float(rng.choice([-1.0, 1.0]))
        vel = (direction * vehicle_speed * math.cos(th),
               direction * vehicle_speed * math.sin(th))
        vehicles.append(VehicleSpec((cx, cy), velocity=vel))

    return SceneSpec(extent=extent, seed=seed, buildings=tuple(buildings),
                     vegetation=tuple(vegetation), vehicles=tuple(vehicles))


def scene_to_osm_xml(scene: SceneSpec, origin_lat: float = 48.0,
                     origin_lon: float = 11.0) -> str:
    """Emit the scene's building footprints as a minimal .osm XML document
    whose equirectangular back-projection reproduces the local coordinates."""
    from .osmloc import local_to_latlon

    lines = ['<?xml version="1.0" encoding="UTF-8"?>',
             '<osm version="0.6" generator="rsl-synth">']
    node_id = 1
    ways = []
    for bi, b in enumerate(scene.buildings):
        refs = []
        for corner in b.corners():
            lat, lon = local_to_latlon(float(corner[0]), float(corner[1]),
                                       origin_lat, origin_lon)
            lines.append(f'  <node id="{node_id}" lat="{lat:.10f}" lon="{lon:.10f}"/>')
            refs.append(node_id)
            node_id += 1
        ways.append((100000 + bi, refs))
    for way_id, refs in ways:
        lines.append(f'  <way id="{way_id}">')
        for r in refs + [refs[0]]:
            lines.append(f'    <nd ref="{r}"/>')
        lines.append('    <tag k="building" v="yes"/>')
        lines.append('  </way>')
    lines.append('</osm>')
    return "\n".join(lines) + "\n"


def generate_trajectory(kind: str, length: float, speed: float, dt: float,
                        imu_substeps: int = 5, turn_duration: float | None = None
                        ) -> tuple[Trajectory, ImuStream]:
    """Exact poses plus the consistent yaw-rate stream.

    The IMU stream runs imu_substeps times faster than the pose rate (gyros
    outpace radar frames). Heading is the trapezoidal integral of exactly
    those samples and positions advance at constant speed along the mid-step
    heading, so integrating the IMU stream reproduces the heading exactly.
    turn_duration (seconds per 90-degree square-loop corner, default 5% of
    the run) controls how hard the corners are.
    """
    if min(length, speed, dt) <= 0:
        raise ValueError("length, speed and dt must be positive")
    if imu_substeps < 1:
        raise ValueError("imu_substeps must be >= 1")
    n_steps = int(round(length / speed / dt))
    m_steps = n_steps * imu_substeps
    ddt = dt / imu_substeps
    m = m_steps + 1
    t_dense = np.arange(m) * ddt
    omega = np.zeros(m)

    if kind == "straight":
        pass
    elif kind == "square-loop":
        if turn_duration is None:
            turn_steps = max(2, m_steps // 20)
        else:
            turn_steps = max(2, int(round(turn_duration / ddt)))
        leg_steps = (m_steps - 4 * turn_steps) // 4
        if leg_steps < 1:
            raise ValueError("square-loop too short for its turns")
        w = (math.pi / 2) / (turn_steps * ddt)
        pos = 0
        for _ in range(4):
            pos += leg_steps
            omega[pos:pos + turn_steps] = w
            pos += turn_steps
    elif kind == "s-curve":
        period = t_dense[-1] if t_dense[-1] > 0 else 1.0
        amp = math.pi * math.pi / (4.0 * period)
        omega = amp * np.sin(TAU * t_dense / period)
    else:
        raise ValueError(f"unknown trajectory kind {kind!r} "
                         "(expected straight, square-loop or s-curve)")

    theta = np.concatenate([[0.0], np.cumsum((omega[1:] + omega[:-1]) * 0.5 * ddt)])
    mid = (theta[1:] + theta[:-1]) * 0.5
    x = np.concatenate([[0.0], np.cumsum(speed * ddt * np.cos(mid))])
    y = np.concatenate([[0.0], np.cumsum(speed * ddt * np.sin(mid))])
    sel = np.arange(0, m, imu_substeps)
    wrapped = np.array([wrap_angle(v) for v in theta[sel]])
    traj = Trajectory(t_dense[sel], np.column_stack([x[sel], y[sel], wrapped]))
    return traj, ImuStream(t_dense, omega)
