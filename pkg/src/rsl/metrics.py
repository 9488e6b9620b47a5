"""Evaluation metrics: raster IoU, KITTI-style odometry drift, average
position error, plus small SVG report plots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .types import Trajectory, se2_delta

#: KITTI evaluation lengths (meters); desk-scale runs use scale_lengths(0.1).
KITTI_LENGTHS = tuple(range(100, 900, 100))
DESK_LENGTHS = tuple(range(10, 90, 10))


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(pred & gt) / union)


def match_timestamps(a: np.ndarray, b: np.ndarray, tolerance: float = 0.05
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor timestamp pairing within tolerance (indices into a, b)."""
    ia, ib = [], []
    for i, t in enumerate(a):
        j = int(np.argmin(np.abs(b - t)))
        if abs(b[j] - t) <= tolerance:
            ia.append(i)
            ib.append(j)
    return np.array(ia, dtype=np.int64), np.array(ib, dtype=np.int64)


@dataclass
class DriftResult:
    """KITTI-style drift: translation percent and rotation deg per 100 m."""

    translation_error: float
    rotation_error: float
    per_length: dict = field(default_factory=dict)  # L -> (trans %, rot deg/100m, count)
    segments: int = 0

    def __post_init__(self):
        if self.translation_error < 0 or self.rotation_error < 0:
            raise ValueError("drift errors must be >= 0")


def _path_distances(poses: np.ndarray) -> np.ndarray:
    steps = np.hypot(np.diff(poses[:, 0]), np.diff(poses[:, 1]))
    return np.concatenate([[0.0], np.cumsum(steps)])


def kitti_drift(est: Trajectory, gt: Trajectory, lengths=KITTI_LENGTHS,
                step: int = 1, tolerance: float = 0.05) -> DriftResult:
    """Average relative-pose error over fixed-length subsequences.

    For each start frame (every `step` frames) and each length L, the
    relative SE(2) motion of est and gt over the gt subsequence of path
    length L is compared; translation error is averaged as a percent of L,
    rotation as degrees per 100 m.
    """
    lengths = sorted(lengths)
    ie, ig = match_timestamps(est.timestamps, gt.timestamps, tolerance)
    if len(ie) < 2:
        raise ValueError("trajectories share fewer than 2 matched timestamps")
    est_poses = [est.pose(i) for i in ie]
    gt_poses = [gt.pose(i) for i in ig]
    dist = _path_distances(gt.poses[ig])
    total = dist[-1]
    if total < lengths[0]:
        raise ValueError(f"ground-truth path is {total:.1f} m; "
                         f"need at least {lengths[0]} m for drift evaluation")

    t_errs: dict = {L: [] for L in lengths}
    r_errs: dict = {L: [] for L in lengths}
    n = len(ie)
    for first in range(0, n, step):
        for L in lengths:
            target = dist[first] + L
            if target > total + 1e-9:
                break
            last = int(np.searchsorted(dist, target))
            if last >= n:
                break
            gt_rel = se2_delta(gt_poses[first], gt_poses[last])
            est_rel = se2_delta(est_poses[first], est_poses[last])
            err = se2_delta(est_rel, gt_rel)
            t_errs[L].append(math.hypot(err.x, err.y) / L * 100.0)
            r_errs[L].append(abs(math.degrees(err.theta)) / L * 100.0)

    per_length = {L: (float(np.mean(t_errs[L])), float(np.mean(r_errs[L])), len(t_errs[L]))
                  for L in lengths if t_errs[L]}
    if not per_length:
        raise ValueError("no evaluable subsequences; ground truth too short")
    all_t = np.concatenate([t_errs[L] for L in per_length])
    all_r = np.concatenate([r_errs[L] for L in per_length])
    return DriftResult(float(np.mean(all_t)), float(np.mean(all_r)),
                       per_length, segments=len(all_t))


def ape(est: Trajectory, gt: Trajectory, tolerance: float = 0.05) -> float:
    """Average position error: mean planar distance over matched timestamps.

    No alignment transform is applied; localization lives in the map frame.
    """
    ie, ig = match_timestamps(est.timestamps, gt.timestamps, tolerance)
    if len(ie) == 0:
        raise ValueError("no timestamp overlap between trajectories")
    d = np.hypot(est.poses[ie, 0] - gt.poses[ig, 0],
                 est.poses[ie, 1] - gt.poses[ig, 1])
    return float(np.mean(d))


def _plt():
    """Headless matplotlib with deterministic SVG ids and no date metadata."""
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "rsl"
    import matplotlib.pyplot as plt
    return plt


def plot_trajectories(path, named_trajectories: dict, title: str = "trajectories") -> None:
    """Overlay x/y tracks into an SVG file."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 6))
    for name, traj in named_trajectories.items():
        ax.plot(traj.poses[:, 0], traj.poses[:, 1], label=name, linewidth=1.2)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title)
    ax.axis("equal")
    ax.legend()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_drift_bars(path, result: DriftResult, title: str = "drift per length") -> None:
    plt = _plt()
    lengths = sorted(result.per_length)
    trans = [result.per_length[L][0] for L in lengths]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([str(L) for L in lengths], trans, color="#4878d0")
    ax.set_xlabel("subsequence length [m]")
    ax.set_ylabel("translation error [%]")
    ax.set_title(title)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_mse_improvement(path, labels: list, mse_values: list, improvement: list,
                         title: str = "MSE vs translation improvement") -> None:
    """Bar/line combination: per-sequence MSE bars with an improvement line."""
    plt = _plt()
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.bar(labels, mse_values, color="#4878d0", label="MSE")
    ax1.set_ylabel("MSE")
    ax2 = ax1.twinx()
    ax2.plot(labels, improvement, color="#d65f5f", marker="o", label="improvement [%]")
    ax2.set_ylabel("translation improvement [%]")
    ax1.set_title(title)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
