"""Label refinement: enclose vegetation clusters with AABBs, then relabel
line- or plane-structured vegetation neighborhoods as building.

Two passes over the cloud, in order:
  1. DBSCAN the vegetation points; for every sufficiently large cluster,
     relabel building/noise points inside the cluster's AABB as vegetation.
  2. For every point still labeled vegetation, radius-search the whole cloud;
     if the neighborhood's singular values say line or plane, relabel the
     vegetation members of that neighborhood as building.

Pass 2 iterates the post-pass-1 vegetation snapshot and applies all relabels
in one batch, so it is order-independent and parallelizable.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

import numpy as np

from .types import LabeledCloud, Point3, SemanticClass

DBSCAN_NOISE = -1


@dataclass(frozen=True)
class RefineParams:
    """Tunables for both passes. The thresholds were calibrated on the
    synthetic suite; every field is config-exposed."""

    dbscan_eps: float = 0.8          # m
    dbscan_min_pts: int = 8
    aabb_min_cluster: int = 30       # "sufficient number of points"
    svd_radius: float = 1.0          # m
    svd_min_points: int = 10         # strict lower bound on neighborhood size
    line_ratio: float = 0.15         # sigma2/sigma1 <= line_ratio -> Line
    plane_ratio: float = 0.15        # sigma3/sigma2 <= plane_ratio -> Plane

    def __post_init__(self):
        if min(self.dbscan_eps, self.dbscan_min_pts, self.aabb_min_cluster,
               self.svd_radius, self.svd_min_points, self.line_ratio,
               self.plane_ratio) <= 0:
            raise ValueError("all refine parameters must be positive")
        if self.line_ratio >= 1 or self.plane_ratio >= 1:
            raise ValueError("structure ratios must be < 1")


class StructureKind(enum.Enum):
    LINE = "line"
    PLANE = "plane"
    SCATTER = "scatter"


@dataclass(frozen=True)
class Aabb:
    """Componentwise min/max envelope of a point set."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError("min corner must be <= max corner componentwise")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Closed-box membership for an (N, 3) array."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        return np.all((xyz >= self.min_corner) & (xyz <= self.max_corner), axis=1)


class HashGrid3:
    """Uniform hash grid for fixed-radius neighbor queries.

    Cell size equals the query radius, so candidates live in the 3x3x3 cell
    block around the query point; exactness versus a linear scan follows.
    """

    def __init__(self, xyz: np.ndarray, radius: float):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        self.radius = float(radius)
        self.cells: dict[tuple, np.ndarray] = {}
        if len(self.xyz) == 0:
            return
        keys = np.floor(self.xyz / self.radius).astype(np.int64)
        order = np.lexsort(keys.T)
        sorted_keys = keys[order]
        bounds = np.flatnonzero(np.any(np.diff(sorted_keys, axis=0), axis=1)) + 1
        starts = np.concatenate([[0], bounds, [len(order)]])
        for a, b in zip(starts[:-1], starts[1:]):
            if a < b:
                self.cells[tuple(sorted_keys[a])] = order[a:b]

    def query(self, center, radius: float | None = None) -> np.ndarray:
        """Indices of points with Euclidean distance <= radius, sorted ascending."""
        r = self.radius if radius is None else float(radius)
        if r > self.radius + 1e-12:
            raise ValueError("query radius exceeds grid cell size")
        center = np.asarray(center, dtype=np.float64).reshape(3)
        base = np.floor(center / self.radius).astype(np.int64)
        found = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    chunk = self.cells.get((base[0] + dx, base[1] + dy, base[2] + dz))
                    if chunk is not None:
                        found.append(chunk)
        if not found:
            return np.zeros(0, dtype=np.int64)
        cand = np.concatenate(found)
        d2 = np.sum((self.xyz[cand] - center) ** 2, axis=1)
        hits = cand[d2 <= r * r]
        hits.sort()
        return hits


def dbscan(points_xyz: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering; returns per-point cluster id, -1 for noise.

    A point is core when its closed eps-ball (itself included) holds at least
    min_pts points. Border points join the first core cluster that reaches
    them during the deterministic index-order expansion, so the assignment is
    reproducible and matches a brute-force scan using the same rule.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    xyz = np.asarray(points_xyz, dtype=np.float64).reshape(-1, 3)
    n = len(xyz)
    labels = np.full(n, -2, dtype=np.int64)  # -2 unvisited
    if n == 0:
        return labels[:0]
    grid = HashGrid3(xyz, eps)
    cluster = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        neighbors = grid.query(xyz[i])
        if len(neighbors) < min_pts:
            labels[i] = DBSCAN_NOISE
            continue
        labels[i] = cluster
        seeds = deque(neighbors)
        while seeds:
            j = seeds.popleft()
            if labels[j] == DBSCAN_NOISE:
                labels[j] = cluster  # border point claimed by first cluster
            if labels[j] != -2:
                continue
            labels[j] = cluster
            j_neighbors = grid.query(xyz[j])
            if len(j_neighbors) >= min_pts:
                seeds.extend(j_neighbors)
        cluster += 1
    return labels


def dbscan_clusters(points_xyz: np.ndarray, eps: float, min_pts: int
                    ) -> tuple[list[np.ndarray], np.ndarray]:
    """dbscan() regrouped as (list of index arrays, noise index array)."""
    labels = dbscan(points_xyz, eps, min_pts)
    clusters = [np.flatnonzero(labels == c) for c in range(labels.max() + 1 if len(labels) else 0)]
    return clusters, np.flatnonzero(labels == DBSCAN_NOISE)


def compute_aabb(points_xyz: np.ndarray) -> Aabb:
    xyz = np.asarray(points_xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        raise ValueError("cannot compute the AABB of an empty cluster")
    return Aabb(xyz.min(axis=0), xyz.max(axis=0))


def refine_vegetation_points(cloud: LabeledCloud, box: Aabb) -> LabeledCloud:
    """Relabel building/noise points inside the closed box as vegetation.

    Vehicle points are deliberately exempt: upstream vehicle segmentation is
    reliable, and cars parked under canopies must keep their class.
    """
    inside = box.contains(cloud.xyz)
    flip = inside & ((cloud.labels == SemanticClass.BUILDING)
                     | (cloud.labels == SemanticClass.NOISE))
    if not flip.any():
        return cloud
    labels = cloud.labels.copy()
    labels[flip] = SemanticClass.VEGETATION
    return cloud.with_labels(labels)


def search_near_points(cloud: LabeledCloud, center: Point3, radius: float,
                       grid: HashGrid3 | None = None) -> tuple[np.ndarray, int]:
    """Indices of all points within radius of center (any label) and count."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if grid is None:
        grid = HashGrid3(cloud.xyz, radius)
    idx = grid.query(center.xyz(), radius)
    return idx, len(idx)


def svd_singular_values(points_xyz: np.ndarray) -> np.ndarray:
    """Singular values (descending) of the mean-centered n x 3 coordinates.

    These are sqrt((n-1) * covariance eigenvalues); the structure ratios are
    scale-invariant so the distinction never changes a decision.
    """
    xyz = np.asarray(points_xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) < 3:
        raise ValueError("need at least 3 points for a structure decomposition")
    centered = xyz - xyz.mean(axis=0)
    return np.linalg.svd(centered, compute_uv=False)


def assess_structure(s1: float, s2: float, s3: float,
                     params: RefineParams) -> StructureKind:
    """Classify a neighborhood's shape from its sorted singular values."""
    if not s1 >= s2 >= s3 >= 0:
        raise ValueError("singular values must satisfy s1 >= s2 >= s3 >= 0")
    if s1 <= 0:
        raise ValueError("all-zero singular values carry no structure")
    if s2 / s1 <= params.line_ratio:
        return StructureKind.LINE
    if s2 > 0 and s3 / s2 <= params.plane_ratio:
        return StructureKind.PLANE
    return StructureKind.SCATTER


@dataclass
class RefineReport:
    """Relabel counts per pass and class transition, for the CLI report."""

    enclosed_to_vegetation: int = 0
    vegetation_to_building: int = 0
    clusters: int = 0
    boxes_applied: int = 0
    transitions: dict = None

    def __post_init__(self):
        if self.transitions is None:
            self.transitions = {}

    def count_transitions(self, before: np.ndarray, after: np.ndarray) -> None:
        changed = before != after
        for b, a in zip(before[changed], after[changed]):
            key = f"{SemanticClass(b).name.lower()}->{SemanticClass(a).name.lower()}"
            self.transitions[key] = self.transitions.get(key, 0) + 1


def refine_labels(cloud: LabeledCloud, params: RefineParams | None = None,
                  report: RefineReport | None = None) -> LabeledCloud:
    """Run both refinement passes; only labels change, never geometry/order."""
    params = params or RefineParams()
    report = report if report is not None else RefineReport()
    if len(cloud) == 0:
        return cloud

    # Pass 1: enclose vegetation clusters, absorbing mislabeled members.
    veg_idx = np.flatnonzero(cloud.labels == SemanticClass.VEGETATION)
    if len(veg_idx):
        clusters, _ = dbscan_clusters(cloud.xyz[veg_idx],
                                      params.dbscan_eps, params.dbscan_min_pts)
        report.clusters = len(clusters)
        before = cloud.labels
        for members in clusters:
            if len(members) < params.aabb_min_cluster:
                continue
            box = compute_aabb(cloud.xyz[veg_idx[members]])
            cloud = refine_vegetation_points(cloud, box)
            report.boxes_applied += 1
        report.enclosed_to_vegetation = int(np.sum(cloud.labels != before))
        report.count_transitions(before, cloud.labels)

    # Pass 2: structure test around the post-pass-1 vegetation snapshot.
    veg_idx = np.flatnonzero(cloud.labels == SemanticClass.VEGETATION)
    if len(veg_idx) == 0:
        return cloud
    grid = HashGrid3(cloud.xyz, params.svd_radius)
    to_building = np.zeros(len(cloud), dtype=bool)
    for j in veg_idx:
        neighborhood = grid.query(cloud.xyz[j].astype(np.float64))
        if len(neighborhood) <= params.svd_min_points:
            continue
        sv = svd_singular_values(cloud.xyz[neighborhood])
        if sv[0] <= 0:
            continue
        kind = assess_structure(sv[0], sv[1], sv[2], params)
        if kind in (StructureKind.LINE, StructureKind.PLANE):
            members = neighborhood[cloud.labels[neighborhood] == SemanticClass.VEGETATION]
            to_building[members] = True
    if to_building.any():
        labels = cloud.labels.copy()
        labels[to_building] = SemanticClass.BUILDING
        report.vegetation_to_building = int(to_building.sum())
        report.count_transitions(cloud.labels, labels)
        cloud = cloud.with_labels(labels)
    return cloud
