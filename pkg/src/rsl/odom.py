"""Planar radar odometry: oriented surface points from masked radar returns,
robust point-to-line Gauss-Newton registration against a multi-keyframe
target, constant-velocity prediction with an optional IMU yaw prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .radar import MaskMode, RadarPointSet, apply_semantic_mask, k_strongest
from .types import ClassRaster, PolarScan, Pose2, se2_apply_many, se2_compose, \
    se2_delta, wrap_angle


@dataclass(frozen=True)
class OrientedSurfacePoint:
    """Per-cell mean with the surface normal and member count."""

    mean: np.ndarray    # (2,)
    normal: np.ndarray  # (2,), unit length
    weight: float       # member point count

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64).reshape(2)
        n = np.asarray(self.normal, dtype=np.float64).reshape(2)
        if abs(float(np.hypot(n[0], n[1])) - 1.0) > 1e-9:
            raise ValueError("normal must be unit length")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True)
class OspSet:
    """Column view of a set of oriented surface points."""

    means: np.ndarray    # (N, 2)
    normals: np.ndarray  # (N, 2) unit rows
    weights: np.ndarray  # (N,)

    def __post_init__(self):
        m = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(m) == len(n) == len(w)):
            raise ValueError("OSP arrays differ in length")
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.means)

    def point(self, i: int) -> OrientedSurfacePoint:
        return OrientedSurfacePoint(self.means[i], self.normals[i],
                                    float(self.weights[i]))

    @staticmethod
    def from_points(points: "list[OrientedSurfacePoint]") -> "OspSet":
        if not points:
            return OspSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
        return OspSet(np.array([p.mean for p in points]),
                      np.array([p.normal for p in points]),
                      np.array([p.weight for p in points]))

    def transformed(self, pose: Pose2) -> "OspSet":
        r = pose.rotation()
        return OspSet(se2_apply_many(pose, self.means), self.normals @ r.T, self.weights)

    @staticmethod
    def concatenate(sets: "list[OspSet]") -> "OspSet":
        if not sets:
            return OspSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
        return OspSet(np.vstack([s.means for s in sets]),
                      np.vstack([s.normals for s in sets]),
                      np.concatenate([s.weights for s in sets]))


def compute_osp(points, cell_size: float = 3.0,
                min_cell_points: int = 4, min_eig_ratio: float = 1.5) -> OspSet:
    """Summarize radar returns per grid cell as mean + surface normal.

    points: a RadarPointSet or a raw (N, 2) array of planar coordinates.
    The normal is the eigenvector of the smaller covariance eigenvalue,
    oriented toward the sensor origin. Cells that are isotropic (eigenvalue
    ratio below min_eig_ratio) or empty of structure are skipped.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    xy = points.xy if isinstance(points, RadarPointSet) \
        else np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(xy) == 0:
        return OspSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    cells = np.floor(xy / cell_size).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    means, normals, weights = [], [], []
    for ci in range(len(counts)):
        if counts[ci] < min_cell_points:
            continue
        members = xy[order[bounds[ci]:bounds[ci + 1]]]
        mean = members.mean(axis=0)
        cov = np.cov(members.T, bias=False)
        evals, evecs = np.linalg.eigh(cov)
        lam_min, lam_max = float(evals[0]), float(evals[1])
        if lam_max <= 1e-12:
            continue
        if lam_min > 0 and lam_max / lam_min < min_eig_ratio:
            continue
        normal = evecs[:, 0]
        if float(normal @ mean) > 0:  # orient toward the sensor origin
            normal = -normal
        means.append(mean)
        normals.append(normal)
        weights.append(float(counts[ci]))
    if not means:
        return OspSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    return OspSet(np.array(means), np.array(normals), np.array(weights))


def huber_loss(e: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))


def huber_weight(e: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(e)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def point_to_line_residual_jacobian(pose: Pose2, src_means: np.ndarray,
                                    tgt_means: np.ndarray, tgt_normals: np.ndarray
                                    ) -> tuple[np.ndarray, np.ndarray]:
    """Residual e_i = n_i . (T(pose) p_i - q_i) and its (N, 3) Jacobian in
    (x, y, theta)."""
    moved = se2_apply_many(pose, src_means)
    e = np.sum(tgt_normals * (moved - tgt_means), axis=1)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    drot = np.array([[-s, -c], [c, -s]])
    dtheta = np.sum(tgt_normals * (src_means @ drot.T), axis=1)
    jac = np.column_stack([tgt_normals[:, 0], tgt_normals[:, 1], dtheta])
    return e, jac


@dataclass
class RegistrationResult:
    pose: Pose2
    converged: bool
    residual: float            # RMS point-to-line distance at the solution
    matches: int
    iterations: int
    objective_trace: list = field(default_factory=list)  # (before, after) per accepted step


@dataclass(frozen=True)
class Keyframe:
    pose: Pose2
    features: OspSet  # expressed in the odometry frame


class KeyframeBuffer:
    """FIFO of at most `capacity` keyframes with a concatenated feature view."""

    def __init__(self, capacity: int = 10):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.keyframes: list[Keyframe] = []
        self._merged: OspSet | None = None

    def __len__(self) -> int:
        return len(self.keyframes)

    def push(self, pose: Pose2, features_sensor: OspSet) -> None:
        """Admit a keyframe; features are moved into the odometry frame."""
        self.keyframes.append(Keyframe(pose, features_sensor.transformed(pose)))
        if len(self.keyframes) > self.capacity:
            self.keyframes.pop(0)
        self._merged = None

    def merged_features(self) -> OspSet:
        if self._merged is None:
            self._merged = OspSet.concatenate([k.features for k in self.keyframes])
        return self._merged


def register(src: OspSet, buffer: KeyframeBuffer, guess: Pose2,
             match_radius: float = 2.0, huber_delta: float = 0.1,
             max_iterations: int = 50, step_tol: float = 1e-6,
             yaw_prior: float | None = None, yaw_prior_weight: float = 0.0,
             min_matches: int = 3) -> RegistrationResult:
    """Gauss-Newton point-to-line alignment of src against all keyframes.

    Each source point is matched to its nearest neighbor in every keyframe
    (within the radius gate), so one point contributes up to K residuals;
    the redundancy averages per-keyframe discretization noise. Residuals are
    Huber-robustified and weighted by the geometric mean of the paired OSP
    weights; matches are recomputed every iteration and steps that would
    increase the objective are halved. Fewer than min_matches matched source
    points reports divergence and returns the guess untouched.
    """
    frames = [k.features for k in buffer.keyframes if len(k.features)]
    if len(src) == 0 or not frames:
        return RegistrationResult(guess, False, math.inf, 0, 0)

    pose = guess
    trace: list = []
    iterations = 0
    converged = False
    gate2 = match_radius * match_radius
    rows = np.arange(len(src))

    def match(p: Pose2):
        """Stacked (src index, target mean, normal, weight) over keyframes."""
        moved = se2_apply_many(p, src.means)
        src_idx, t_means, t_normals, t_weights = [], [], [], []
        for feats in frames:
            d2 = np.sum((moved[:, None, :] - feats.means[None, :, :]) ** 2, axis=2)
            nearest = np.argmin(d2, axis=1)
            ok = d2[rows, nearest] <= gate2
            src_idx.append(rows[ok])
            t_means.append(feats.means[nearest[ok]])
            t_normals.append(feats.normals[nearest[ok]])
            t_weights.append(feats.weights[nearest[ok]])
        return (np.concatenate(src_idx), np.vstack(t_means),
                np.vstack(t_normals), np.concatenate(t_weights))

    def objective(p: Pose2, si, tm, tn, weights) -> float:
        e, _ = point_to_line_residual_jacobian(p, src.means[si], tm, tn)
        total = float(np.sum(weights * huber_loss(e, huber_delta)))
        if yaw_prior is not None and yaw_prior_weight > 0:
            total += 0.5 * yaw_prior_weight * wrap_angle(p.theta - yaw_prior) ** 2
        return total

    n_matched = 0
    for iterations in range(1, max_iterations + 1):
        si, tm, tn, tw = match(pose)
        n_matched = len(np.unique(si))
        if n_matched < min_matches:
            return RegistrationResult(guess, False, math.inf, n_matched, iterations)
        pair_w = np.sqrt(src.weights[si] * tw)
        e, jac = point_to_line_residual_jacobian(pose, src.means[si], tm, tn)
        w = pair_w * huber_weight(e, huber_delta)
        h = jac.T @ (jac * w[:, None])
        g = jac.T @ (w * e)
        if yaw_prior is not None and yaw_prior_weight > 0:
            h[2, 2] += yaw_prior_weight
            g[2] += yaw_prior_weight * wrap_angle(pose.theta - yaw_prior)
        try:
            step = np.linalg.solve(h + 1e-12 * np.eye(3), -g)
        except np.linalg.LinAlgError:
            return RegistrationResult(pose, False, math.inf, n_matched, iterations)

        before = objective(pose, si, tm, tn, pair_w)
        candidate = Pose2(pose.x + step[0], pose.y + step[1], pose.theta + step[2])
        scale = 1.0
        for _ in range(12):
            after = objective(candidate, si, tm, tn, pair_w)
            if after <= before * (1 + 1e-12) + 1e-12:
                break
            scale *= 0.5
            candidate = Pose2(pose.x + scale * step[0], pose.y + scale * step[1],
                              pose.theta + scale * step[2])
        else:
            candidate = pose
            after = before
        trace.append((before, after))
        pose = candidate
        if float(np.linalg.norm(scale * step)) < step_tol:
            converged = True
            break

    si, tm, tn, _ = match(pose)
    if len(si):
        e, _ = point_to_line_residual_jacobian(pose, src.means[si], tm, tn)
        rms = float(np.sqrt(np.mean(e * e)))
    else:
        rms = math.inf
    return RegistrationResult(pose, converged, rms, n_matched, iterations, trace)


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    yaw_rate: float


@dataclass(frozen=True)
class ImuStream:
    """Yaw-rate samples with increasing timestamps."""

    timestamps: np.ndarray
    yaw_rates: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        wz = np.asarray(self.yaw_rates, dtype=np.float64).reshape(-1)
        if len(ts) != len(wz):
            raise ValueError("timestamps and yaw_rates differ in length")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("IMU timestamps must be increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "yaw_rates", wz)

    @staticmethod
    def from_samples(samples: "list[ImuSample]") -> "ImuStream":
        return ImuStream(np.array([s.timestamp for s in samples]),
                         np.array([s.yaw_rate for s in samples]))


class ImuCoverageError(ValueError):
    """IMU samples do not cover the requested interval densely enough."""


def integrate_imu_yaw(imu: ImuStream, t0: float, t1: float,
                      max_gap: float = 0.1) -> float:
    """Trapezoidal integral of yaw rate over [t0, t1].

    Requires samples spanning the interval with no internal gap above
    max_gap seconds; endpoint rates are linearly interpolated.
    """
    if not t0 < t1:
        raise ValueError("need t0 < t1")
    ts, wz = imu.timestamps, imu.yaw_rates
    eps = 1e-9
    if len(ts) == 0 or ts[0] > t0 + eps or ts[-1] < t1 - eps:
        raise ImuCoverageError(f"IMU stream does not span [{t0}, {t1}]")
    inside = (ts > t0) & (ts < t1)
    tt = np.concatenate([[t0], ts[inside], [t1]])
    ww = np.concatenate([[np.interp(t0, ts, wz)], wz[inside], [np.interp(t1, ts, wz)]])
    gaps = np.diff(tt)
    if gaps.size and float(gaps.max()) > max_gap + eps:
        raise ImuCoverageError(
            f"IMU coverage gap of {float(gaps.max()):.3f} s in [{t0}, {t1}]")
    return float(np.trapezoid(ww, tt))


@dataclass
class OdomConfig:
    k_strongest: int = 12
    min_power: float = 0.0
    mask_mode: MaskMode = MaskMode.NONE_REMOVED
    mask_dilation: int = 1
    cell_size: float = 3.0
    min_cell_points: int = 4
    min_eig_ratio: float = 1.5
    match_radius: float = 2.0
    huber_delta: float = 0.1
    max_iterations: int = 50
    step_tol: float = 1e-6
    keyframe_distance: float = 1.5
    keyframe_angle: float = math.radians(5.0)
    max_keyframes: int = 10
    imu_penalty_weight: float = 0.0  # 0 = prior enters as initial guess only


@dataclass
class StepResult:
    pose: Pose2
    converged: bool
    residual: float
    keyframe_admitted: bool
    features: int


class RadarOdometry:
    """Single-sequence odometry state, stepped in frame order."""

    def __init__(self, config: OdomConfig | None = None, imu: ImuStream | None = None):
        self.config = config or OdomConfig()
        self.imu = imu
        self.buffer = KeyframeBuffer(self.config.max_keyframes)
        self.pose = Pose2.identity()
        self.last_delta = Pose2.identity()
        self.last_timestamp: float | None = None
        self.last_keyframe_pose: Pose2 | None = None
        self.frames = 0
        self.diverged_frames: list[int] = []

    def _extract(self, scan: PolarScan, raster: ClassRaster | None) -> OspSet:
        cfg = self.config
        points = k_strongest(scan, cfg.k_strongest, cfg.min_power)
        if raster is not None and cfg.mask_mode != MaskMode.NONE_REMOVED:
            points = apply_semantic_mask(points, raster, cfg.mask_mode, cfg.mask_dilation)
        return compute_osp(points, cfg.cell_size, cfg.min_cell_points, cfg.min_eig_ratio)

    def step(self, scan: PolarScan, raster: ClassRaster | None = None) -> StepResult:
        cfg = self.config
        features = self._extract(scan, raster)

        if self.frames == 0:
            self.buffer.push(self.pose, features)
            self.last_keyframe_pose = self.pose
            self.last_timestamp = scan.timestamp
            self.frames += 1
            return StepResult(self.pose, True, 0.0, True, len(features))

        # Constant-velocity prediction; IMU overrides the yaw component.
        delta = self.last_delta
        yaw_prior = None
        if self.imu is not None and self.last_timestamp is not None \
                and scan.timestamp > self.last_timestamp:
            dyaw = integrate_imu_yaw(self.imu, self.last_timestamp, scan.timestamp)
            delta = Pose2(delta.x, delta.y, dyaw)
            yaw_prior = wrap_angle(self.pose.theta + dyaw)
        guess = se2_compose(self.pose, delta)

        result = register(
            features, self.buffer, guess,
            match_radius=cfg.match_radius, huber_delta=cfg.huber_delta,
            max_iterations=cfg.max_iterations, step_tol=cfg.step_tol,
            yaw_prior=yaw_prior, yaw_prior_weight=cfg.imu_penalty_weight)
        if math.isfinite(result.residual):
            new_pose = result.pose
        else:
            new_pose = guess  # degenerate scan: fall back to the prediction
            self.diverged_frames.append(self.frames)

        self.last_delta = se2_delta(self.pose, new_pose)
        self.pose = new_pose
        self.last_timestamp = scan.timestamp
        admitted = False
        ref = self.last_keyframe_pose
        motion = se2_delta(ref, new_pose)
        if math.hypot(motion.x, motion.y) >= cfg.keyframe_distance \
                or abs(motion.theta) >= cfg.keyframe_angle:
            self.buffer.push(new_pose, features)
            self.last_keyframe_pose = new_pose
            admitted = True
        self.frames += 1
        return StepResult(new_pose, result.converged, result.residual,
                          admitted, len(features))
