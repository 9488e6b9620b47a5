"""Localization against OpenStreetMap building footprints.

Building ways are decomposed into wall segments on a local tangent plane;
building-class radar features register to the nearest compatible wall with
per-wall tracking weights (walls seen on their expected side gain weight,
contradicted walls lose it); an EKF fuses odometry deltas with the map
correction.
"""

from __future__ import annotations

import enum
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .odom import OspSet, compute_osp, huber_weight
from .radar import MaskMode, apply_semantic_mask, k_strongest
from .types import (Pose2, Trajectory, se2_apply_many, se2_compose,
                    se2_delta, se2_inverse, wrap_angle)

EARTH_RADIUS_M = 6_371_000.0


class OsmParseError(ValueError):
    pass


@dataclass(frozen=True)
class WallSegment:
    start: np.ndarray
    end: np.ndarray
    wall_id: str
    building_id: str

    def __post_init__(self):
        a = np.asarray(self.start, dtype=np.float64).reshape(2)
        b = np.asarray(self.end, dtype=np.float64).reshape(2)
        if float(np.hypot(*(b - a))) <= 0:
            raise ValueError(f"wall {self.wall_id}: zero length")
        object.__setattr__(self, "start", a)
        object.__setattr__(self, "end", b)

    @property
    def direction(self) -> np.ndarray:
        e = self.end - self.start
        return e / np.linalg.norm(e)

    @property
    def normal(self) -> np.ndarray:
        d = self.direction
        return np.array([-d[1], d[0]])


def latlon_to_local(lat: float, lon: float, origin_lat: float, origin_lon: float
                    ) -> tuple[float, float]:
    """Equirectangular tangent plane about the origin: x east, y north."""
    x = math.radians(lon - origin_lon) * EARTH_RADIUS_M * math.cos(math.radians(origin_lat))
    y = math.radians(lat - origin_lat) * EARTH_RADIUS_M
    return x, y


def local_to_latlon(x: float, y: float, origin_lat: float, origin_lon: float
                    ) -> tuple[float, float]:
    lat = origin_lat + math.degrees(y / EARTH_RADIUS_M)
    lon = origin_lon + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(origin_lat))))
    return lat, lon


def parse_osm(source, origin_lat: float, origin_lon: float) -> list[WallSegment]:
    """Decompose closed building ways of an .osm XML document into wall
    segments in local coordinates. Non-building ways are skipped; a building
    way referencing a missing node rejects the document, naming the way."""
    if isinstance(source, (str, Path)) and "\n" not in str(source) and Path(source).exists():
        root = ET.parse(source).getroot()
    else:
        root = ET.fromstring(str(source))
    nodes: dict[str, tuple[float, float]] = {}
    for node in root.iter("node"):
        nodes[node.attrib["id"]] = (float(node.attrib["lat"]), float(node.attrib["lon"]))
    walls: list[WallSegment] = []
    for way in root.iter("way"):
        tags = {t.attrib.get("k"): t.attrib.get("v") for t in way.findall("tag")}
        if "building" not in tags:
            continue
        way_id = way.attrib.get("id", "?")
        refs = [nd.attrib["ref"] for nd in way.findall("nd")]
        if len(refs) < 4 or refs[0] != refs[-1]:
            continue  # open or degenerate way: not a footprint polygon
        missing = [r for r in refs if r not in nodes]
        if missing:
            raise OsmParseError(f"way {way_id} references missing node {missing[0]}")
        coords = [latlon_to_local(*nodes[r], origin_lat, origin_lon) for r in refs]
        for i in range(len(coords) - 1):
            a, b = np.array(coords[i]), np.array(coords[i + 1])
            if float(np.hypot(*(b - a))) <= 1e-9:
                continue
            walls.append(WallSegment(a, b, f"{way_id}:{i}", way_id))
    return walls


class WallMap:
    """Vectorized nearest-wall queries over a fixed segment list."""

    def __init__(self, walls: list[WallSegment]):
        self.walls = list(walls)
        if self.walls:
            self.starts = np.array([w.start for w in self.walls])
            self.ends = np.array([w.end for w in self.walls])
        else:
            self.starts = np.zeros((0, 2))
            self.ends = np.zeros((0, 2))
        edges = self.ends - self.starts
        self.lengths2 = np.maximum(np.sum(edges * edges, axis=1), 1e-300)
        self.edges = edges
        self.normals = np.column_stack([-edges[:, 1], edges[:, 0]]) \
            / np.sqrt(self.lengths2)[:, None] if len(self.walls) else np.zeros((0, 2))

    def __len__(self) -> int:
        return len(self.walls)

    def nearest(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per point: index of nearest segment, distance, projection point."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        rel = pts[:, None, :] - self.starts[None, :, :]
        t = np.clip(np.sum(rel * self.edges[None, :, :], axis=2) / self.lengths2[None, :],
                    0.0, 1.0)
        proj = self.starts[None, :, :] + t[:, :, None] * self.edges[None, :, :]
        d2 = np.sum((pts[:, None, :] - proj) ** 2, axis=2)
        idx = np.argmin(d2, axis=1)
        rows = np.arange(len(pts))
        return idx, np.sqrt(d2[rows, idx]), proj[rows, idx]


class Side(enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class WallTrack:
    wall_id: str
    weight: float
    expected_side: Side


@dataclass(frozen=True)
class TrackParams:
    alpha_up: float = 1.2
    alpha_down: float = 0.5
    decay: float = 0.9          # geometric decay of unseen weights toward 1
    w_min: float = 0.2
    w_max: float = 3.0
    ambiguous_band: float = 0.2  # |lateral| below this skips the side update


@dataclass(frozen=True)
class WallMatch:
    wall_id: str
    side: Side
    distance: float


@dataclass(frozen=True)
class LocState:
    """Gaussian pose belief: mean plus 3x3 covariance over (x, y, theta)."""

    mean: Pose2
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.float64).reshape(3, 3)
        _require_psd(cov, "state covariance")
        object.__setattr__(self, "covariance", cov)


def _require_psd(cov: np.ndarray, name: str) -> None:
    if np.abs(cov - cov.T).max() > 1e-9:
        raise ValueError(f"{name} must be symmetric")
    eigenvalues = np.linalg.eigvalsh(cov)
    if eigenvalues.min() < -1e-9:
        raise ValueError(f"{name} must be positive semi-definite "
                         f"(min eigenvalue {eigenvalues.min():.3e})")


@dataclass
class MapRegistration:
    correction: Pose2          # world-frame delta: corrected = correction * state
    corrected_pose: Pose2
    matches: list
    n_matches: int
    condition: float
    rank_deficient: bool
    confident: bool


@dataclass(frozen=True)
class MapRegParams:
    match_gate: float = 3.0
    max_normal_angle: float = math.radians(30.0)
    huber_delta: float = 0.1
    max_iterations: int = 25
    step_tol: float = 1e-8
    min_matches: int = 10
    max_condition: float = 1e4
    track: TrackParams = field(default_factory=TrackParams)


def classify_side(pose: Pose2, target_point: np.ndarray,
                  ambiguous_band: float = 0.2) -> Side:
    """Side of the vehicle a wall projection falls on (cross product sign)."""
    h = np.array([math.cos(pose.theta), math.sin(pose.theta)])
    v = np.asarray(target_point, dtype=np.float64) - np.array([pose.x, pose.y])
    cross = h[0] * v[1] - h[1] * v[0]
    if abs(cross) < ambiguous_band:
        return Side.AMBIGUOUS
    return Side.LEFT if cross > 0 else Side.RIGHT


def register_to_map(features: OspSet, wall_map: WallMap,
                    tracks: dict, state: LocState,
                    params: MapRegParams | None = None) -> MapRegistration:
    """Iteratively reweighted point-to-wall alignment from the state mean.

    Feature means/normals are in the sensor frame. Each iteration matches
    transformed features to their nearest wall within the gate (requiring
    normal/wall angular compatibility), weights residuals by Huber x wall
    track weight, and solves the Gauss-Newton step by truncated SVD so a
    rank-deficient geometry (straight corridor) still yields the observable
    part of the correction, flagged via `rank_deficient`.
    """
    params = params or MapRegParams()
    pose = state.mean
    condition = math.inf
    n_matched = 0
    matched_idx = np.zeros(0, dtype=np.int64)
    wall_idx = np.zeros(0, dtype=np.int64)
    projections = np.zeros((0, 2))

    if len(features) == 0 or len(wall_map) == 0:
        return MapRegistration(Pose2.identity(), pose, [], 0, math.inf, True, False)

    cos_gate = math.cos(params.max_normal_angle)
    for _ in range(params.max_iterations):
        rot = pose.rotation()
        moved = se2_apply_many(pose, features.means)
        moved_normals = features.normals @ rot.T
        idx, dist, proj = wall_map.nearest(moved)
        wall_normals = wall_map.normals[idx]
        compatible = np.abs(np.sum(moved_normals * wall_normals, axis=1)) >= cos_gate
        ok = (dist <= params.match_gate) & compatible
        n_matched = int(ok.sum())
        if n_matched == 0:
            break
        matched_idx = np.flatnonzero(ok)
        wall_idx = idx[ok]
        projections = proj[ok]
        nrm = wall_normals[ok]
        e = np.sum(nrm * (moved[ok] - projections), axis=1)
        track_w = np.array([
            tracks[wall_map.walls[w].wall_id].weight
            if wall_map.walls[w].wall_id in tracks else 1.0
            for w in wall_idx])
        w = track_w * features.weights[ok] * huber_weight(e, params.huber_delta)
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        drot = np.array([[-s, -c], [c, -s]])
        dtheta = np.sum(nrm * (features.means[ok] @ drot.T), axis=1)
        jac = np.column_stack([nrm[:, 0], nrm[:, 1], dtheta])
        h = jac.T @ (jac * w[:, None])
        g = jac.T @ (w * e)
        u, sv, vt = np.linalg.svd(h)
        condition = float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf
        inv = np.where(sv > sv[0] / params.max_condition, 1.0 / np.maximum(sv, 1e-300), 0.0)
        step = -(vt.T * inv) @ (u.T @ g)
        pose = Pose2(pose.x + step[0], pose.y + step[1], pose.theta + step[2])
        if float(np.linalg.norm(step)) < params.step_tol:
            break

    rank_deficient = condition > params.max_condition
    final_moved = se2_apply_many(pose, features.means[matched_idx]) \
        if len(matched_idx) else np.zeros((0, 2))
    matches = [
        WallMatch(wall_map.walls[w].wall_id,
                  classify_side(pose, projections[i], params.track.ambiguous_band),
                  float(np.hypot(*(final_moved[i] - projections[i]))))
        for i, w in enumerate(wall_idx)]
    confident = n_matched >= params.min_matches and not rank_deficient
    correction = se2_compose(pose, se2_inverse(state.mean))
    return MapRegistration(correction, pose, matches, n_matched,
                           condition, rank_deficient, confident)


def update_wall_tracks(tracks: dict, matches: list, params: TrackParams | None = None
                       ) -> dict:
    """Reweight wall tracks from this frame's matches.

    Re-registration on the expected side multiplies the weight by alpha_up,
    contradiction by alpha_down; unseen tracks decay geometrically toward 1;
    new walls enter at weight 1 with the observed side. Weights are clamped
    to [w_min, w_max].
    """
    params = params or TrackParams()
    seen: dict[str, Side] = {}
    for m in matches:
        # a wall matched several times this frame: any unambiguous side wins,
        # contradiction within one frame counts as ambiguous
        prev = seen.get(m.wall_id)
        if prev is None or prev == Side.AMBIGUOUS:
            seen[m.wall_id] = m.side
        elif m.side != Side.AMBIGUOUS and m.side != prev:
            seen[m.wall_id] = Side.AMBIGUOUS
    out: dict[str, WallTrack] = {}
    clamp = lambda w: float(min(max(w, params.w_min), params.w_max))
    for wall_id, track in tracks.items():
        if wall_id in seen:
            side = seen[wall_id]
            if side == Side.AMBIGUOUS:
                out[wall_id] = track
            elif side == track.expected_side:
                out[wall_id] = WallTrack(wall_id, clamp(track.weight * params.alpha_up),
                                         track.expected_side)
            else:
                out[wall_id] = WallTrack(wall_id, clamp(track.weight * params.alpha_down),
                                         track.expected_side)
        else:
            decayed = 1.0 + (track.weight - 1.0) * params.decay
            out[wall_id] = WallTrack(wall_id, clamp(decayed), track.expected_side)
    for wall_id, side in seen.items():
        if wall_id not in out and side != Side.AMBIGUOUS:
            out[wall_id] = WallTrack(wall_id, 1.0, side)
    return out


def ekf_step(state: LocState, odom_delta: Pose2, odom_cov: np.ndarray,
             correction: Pose2 | None = None,
             corr_cov: np.ndarray | None = None) -> LocState:
    """EKF predict with a body-frame odometry delta, then (optionally) a
    full-pose Kalman update at the corrected pose, Joseph-form for PSD."""
    odom_cov = np.asarray(odom_cov, dtype=np.float64).reshape(3, 3)
    _require_psd(odom_cov, "odometry covariance")
    mean = se2_compose(state.mean, odom_delta)
    c, s = math.cos(state.mean.theta), math.sin(state.mean.theta)
    f = np.array([
        [1.0, 0.0, -s * odom_delta.x - c * odom_delta.y],
        [0.0, 1.0, c * odom_delta.x - s * odom_delta.y],
        [0.0, 0.0, 1.0]])
    g = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    cov = f @ state.covariance @ f.T + g @ odom_cov @ g.T

    if correction is not None:
        if corr_cov is None:
            raise ValueError("correction requires a measurement covariance")
        corr_cov = np.asarray(corr_cov, dtype=np.float64).reshape(3, 3)
        _require_psd(corr_cov, "correction covariance")
        z = se2_compose(correction, mean)
        innovation = np.array([z.x - mean.x, z.y - mean.y,
                               wrap_angle(z.theta - mean.theta)])
        s_mat = cov + corr_cov
        gain = cov @ np.linalg.inv(s_mat)
        upd = gain @ innovation
        mean = Pose2(mean.x + upd[0], mean.y + upd[1], mean.theta + upd[2])
        i_kh = np.eye(3) - gain
        cov = i_kh @ cov @ i_kh.T + gain @ corr_cov @ gain.T

    cov = 0.5 * (cov + cov.T)
    return LocState(mean, cov)


@dataclass
class LocalizationConfig:
    k_strongest: int = 12
    min_power: float = 0.0
    mask_dilation: int = 1
    cell_size: float = 3.0
    min_cell_points: int = 4
    min_eig_ratio: float = 1.5
    registration: MapRegParams = field(default_factory=MapRegParams)
    odom_cov: np.ndarray = field(
        default_factory=lambda: np.diag([0.05 ** 2, 0.05 ** 2, math.radians(0.5) ** 2]))
    corr_cov: np.ndarray = field(
        default_factory=lambda: np.diag([0.3 ** 2, 0.3 ** 2, math.radians(1.0) ** 2]))
    initial_cov: np.ndarray = field(
        default_factory=lambda: np.diag([1.0, 1.0, math.radians(5.0) ** 2]))
    initial_pose: Pose2 | None = None
    timestamp_tolerance: float = 0.05


def localize_sequence(scans: list, rasters: list, odometry: Trajectory,
                      wall_map: WallMap, config: LocalizationConfig | None = None,
                      ground_truth: Trajectory | None = None
                      ) -> tuple[Trajectory, dict]:
    """Full localization loop over time-aligned scans/rasters/odometry.

    Per frame: building-mask the radar returns, register to the wall map,
    update wall tracks, EKF-fuse (correction applied only when confident).
    Returns the estimated trajectory and a per-frame report; when ground
    truth is supplied the report carries the average position error.
    """
    config = config or LocalizationConfig()
    if rasters is not None and len(rasters) != len(scans):
        raise ValueError(f"{len(scans)} scans but {len(rasters)} rasters")

    tracks: dict = {}
    state: LocState | None = None
    prev_odom: Pose2 | None = None
    est_times, est_poses = [], []
    frames_report = []

    for i, scan in enumerate(scans):
        j = int(np.argmin(np.abs(odometry.timestamps - scan.timestamp)))
        if abs(odometry.timestamps[j] - scan.timestamp) > config.timestamp_tolerance:
            raise ValueError(f"frame {i}: no odometry within "
                             f"{config.timestamp_tolerance} s of t={scan.timestamp}")
        odom_pose = odometry.pose(j)

        if state is None:
            start = config.initial_pose if config.initial_pose is not None else odom_pose
            state = LocState(start, config.initial_cov)
            prev_odom = odom_pose
        else:
            delta = se2_delta(prev_odom, odom_pose)
            prev_odom = odom_pose
            state = ekf_step(state, delta, config.odom_cov)

        points = k_strongest(scan, config.k_strongest, config.min_power)
        if rasters is not None:
            points = apply_semantic_mask(points, rasters[i], MaskMode.ONLY_BUILDING,
                                         config.mask_dilation)
        features = compute_osp(points, config.cell_size, config.min_cell_points,
                               config.min_eig_ratio)
        reg = register_to_map(features, wall_map, tracks, state, config.registration)
        if reg.confident:
            state = ekf_step(state, Pose2.identity(), np.zeros((3, 3)),
                             reg.correction, config.corr_cov)
        if reg.n_matches:
            tracks = update_wall_tracks(tracks, reg.matches, config.registration.track)
        else:
            tracks = update_wall_tracks(tracks, [], config.registration.track)

        est_times.append(scan.timestamp)
        est_poses.append(state.mean)
        frames_report.append({
            "frame": i, "matches": reg.n_matches, "applied": bool(reg.confident),
            "condition": None if math.isinf(reg.condition) else reg.condition,
            "rank_deficient": bool(reg.rank_deficient),
        })

    est = Trajectory.from_poses(np.array(est_times), est_poses)
    report: dict = {"frames": frames_report,
                    "applied_fraction": float(np.mean([f["applied"] for f in frames_report]))
                    if frames_report else 0.0}
    if ground_truth is not None:
        from .metrics import ape
        report["ape_m"] = ape(est, ground_truth)
    return est, report
