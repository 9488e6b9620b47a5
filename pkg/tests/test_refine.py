from collections import deque

import numpy as np
import pytest

from rsl import LabeledCloud, Point3, SemanticClass
from rsl.refine import (Aabb, HashGrid3, RefineParams, StructureKind,
                        assess_structure, compute_aabb, dbscan,
                        dbscan_clusters, refine_labels,
                        refine_vegetation_points, search_near_points,
                        svd_singular_values)

B, V, G, N = (SemanticClass.BUILDING, SemanticClass.VEGETATION,
              SemanticClass.VEHICLE, SemanticClass.NOISE)


def make_cloud(xyz, labels):
    xyz = np.asarray(xyz, dtype=np.float32).reshape(-1, 3)
    pts = np.column_stack([xyz, np.zeros(len(xyz), np.float32)])
    return LabeledCloud(pts, np.asarray(labels, np.uint8))


def brute_dbscan(xyz, eps, min_pts):
    """O(n^2) oracle with the same deterministic index-order expansion."""
    n = len(xyz)
    d2 = np.sum((xyz[:, None, :] - xyz[None, :, :]) ** 2, axis=2)
    neigh = [np.flatnonzero(d2[i] <= eps * eps) for i in range(n)]
    labels = np.full(n, -2, dtype=np.int64)
    cid = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        if len(neigh[i]) < min_pts:
            labels[i] = -1
            continue
        labels[i] = cid
        queue = deque(neigh[i])
        while queue:
            j = queue.popleft()
            if labels[j] == -1:
                labels[j] = cid
            if labels[j] != -2:
                continue
            labels[j] = cid
            if len(neigh[j]) >= min_pts:
                queue.extend(neigh[j])
        cid += 1
    return labels


class TestDbscan:
    def test_collocated_points_one_cluster(self):
        xyz = np.zeros((5, 3)) + [[0.01, 0, 0], [0, 0.01, 0], [0, 0, 0.01],
                                  [0.02, 0, 0], [0, 0, 0]]
        labels = dbscan(xyz, 0.5, 3)
        assert np.all(labels == 0)

    def test_two_far_groups(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-0.05, 0.05, size=(10, 3))
        b = a + [100.0, 0, 0]
        labels = dbscan(np.vstack([a, b]), 0.5, 3)
        assert len(set(labels[:10])) == 1 and len(set(labels[10:])) == 1
        assert labels[0] != labels[10]
        assert -1 not in labels

    def test_isolated_points_are_noise(self):
        labels = dbscan(np.array([[0, 0, 0], [50, 0, 0]]), 0.5, 3)
        assert np.all(labels == -1)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(50, 400))
        # clumpy data so clusters actually form
        centers = rng.uniform(-10, 10, size=(4, 3))
        xyz = np.vstack([c + rng.normal(0, 0.4, size=(n // 4, 3)) for c in centers])
        eps, min_pts = 0.8, 6
        assert np.array_equal(dbscan(xyz, eps, min_pts),
                              brute_dbscan(xyz, eps, min_pts))

    def test_clusters_partition_points(self):
        rng = np.random.default_rng(5)
        xyz = rng.uniform(-5, 5, size=(200, 3))
        clusters, noise = dbscan_clusters(xyz, 0.9, 4)
        counted = np.concatenate([noise] + clusters) if clusters else noise
        assert sorted(counted.tolist()) == list(range(200))


class TestAabb:
    def test_single_point_degenerate(self):
        box = compute_aabb([[1.0, 2.0, 3.0]])
        assert np.array_equal(box.min_corner, box.max_corner)

    def test_two_points(self):
        box = compute_aabb([[0, 0, 0], [1, 2, 3]])
        assert np.array_equal(box.min_corner, [0, 0, 0])
        assert np.array_equal(box.max_corner, [1, 2, 3])

    def test_componentwise_extrema(self):
        # oracle: componentwise min/max of {(-1,0,0),(1,0,0),(0,-1,5)}
        box = compute_aabb([[-1, 0, 0], [1, 0, 0], [0, -1, 5]])
        assert np.array_equal(box.min_corner, [-1, -1, 0])
        assert np.array_equal(box.max_corner, [1, 0, 5])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_aabb(np.zeros((0, 3)))

    def test_invalid_box_rejected(self):
        with pytest.raises(ValueError):
            Aabb([1, 0, 0], [0, 0, 0])


class TestRefineVegetationPoints:
    BOX = Aabb([0, 0, 0], [1, 1, 1])

    def test_building_inside_becomes_vegetation(self):
        cloud = make_cloud([[0.5, 0.5, 0.5]], [B])
        out = refine_vegetation_points(cloud, self.BOX)
        assert out.labels[0] == V

    def test_building_outside_unchanged(self):
        cloud = make_cloud([[2, 2, 2]], [B])
        out = refine_vegetation_points(cloud, self.BOX)
        assert out.labels[0] == B

    def test_vehicle_inside_unchanged(self):
        # cars parked under canopies keep their (reliable) class
        cloud = make_cloud([[0.5, 0.5, 0.5]], [G])
        out = refine_vegetation_points(cloud, self.BOX)
        assert out.labels[0] == G

    def test_noise_inside_becomes_vegetation(self):
        cloud = make_cloud([[0.5, 0.5, 0.5]], [N])
        assert refine_vegetation_points(cloud, self.BOX).labels[0] == V

    def test_boundary_is_closed(self):
        cloud = make_cloud([[0, 0, 0], [1, 1, 1]], [B, B])
        out = refine_vegetation_points(cloud, self.BOX)
        assert np.all(out.labels == V)


class TestSearchNearPoints:
    def test_only_center_when_radius_small(self):
        cloud = make_cloud([[0, 0, 0], [5, 0, 0], [0, 7, 0]], [V, V, V])
        idx, count = search_near_points(cloud, Point3(0, 0, 0), 0.5)
        assert count == 1 and idx.tolist() == [0]

    def test_boundary_inclusive(self):
        cloud = make_cloud([[0, 0, 0], [0.5, 0, 0], [1.0, 0, 0], [2.0, 0, 0]],
                           [V, V, V, V])
        idx, count = search_near_points(cloud, Point3(0, 0, 0), 1.0)
        assert count == 3
        assert idx.tolist() == [0, 1, 2]

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_linear_scan(self, seed):
        rng = np.random.default_rng(seed)
        xyz = rng.uniform(-3, 3, size=(200, 3))
        cloud = make_cloud(xyz, np.zeros(200))
        center = Point3(*rng.uniform(-3, 3, size=3))
        r = float(rng.uniform(0.3, 2.0))
        idx, count = search_near_points(cloud, center, r)
        brute = np.flatnonzero(np.linalg.norm(xyz - center.xyz(), axis=1) <= r)
        assert np.array_equal(idx, brute)
        assert count == len(brute)


class TestSvdStructure:
    def test_line_has_two_zero_singular_values(self):
        xyz = np.column_stack([np.linspace(0, 5, 40), np.zeros(40), np.zeros(40)])
        s = svd_singular_values(xyz)
        assert s[1] < 1e-9 and s[2] < 1e-9

    def test_plane_has_one_zero_singular_value(self):
        rng = np.random.default_rng(0)
        xyz = np.column_stack([rng.uniform(-3, 3, 60), rng.uniform(-3, 3, 60),
                               np.zeros(60)])
        s = svd_singular_values(xyz)
        assert s[2] < 1e-9 and s[1] > 1.0

    def test_gaussian_ball_nearly_isotropic(self):
        # oracle: eigen-decompose the sample covariance directly
        rng = np.random.default_rng(1)
        xyz = rng.normal(size=(100, 3))
        s = svd_singular_values(xyz)
        assert s[0] / s[2] < 3.0
        cov_eigs = np.sort(np.linalg.eigvalsh(np.cov(xyz.T)))[::-1]
        assert np.allclose(s ** 2 / (len(xyz) - 1), cov_eigs, rtol=1e-9)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            svd_singular_values([[0, 0, 0], [1, 1, 1]])

    def test_assess_examples(self):
        p = RefineParams()
        assert assess_structure(5.0, 0.01, 0.005, p) == StructureKind.LINE
        assert assess_structure(5.0, 4.8, 0.01, p) == StructureKind.PLANE
        assert assess_structure(1.0, 0.9, 0.8, p) == StructureKind.SCATTER

    def test_assess_scale_invariant(self):
        p = RefineParams()
        rng = np.random.default_rng(2)
        for _ in range(50):
            s = np.sort(rng.uniform(0.001, 10, 3))[::-1]
            base = assess_structure(*s, p)
            for c in (1e-3, 0.5, 7.0, 1e4):
                assert assess_structure(*(c * s), p) == base

    def test_assess_rejects_all_zero(self):
        with pytest.raises(ValueError):
            assess_structure(0.0, 0.0, 0.0, RefineParams())


def synthetic_wall(n=500, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 10, n)
    z = rng.uniform(0, 3, n)
    y = rng.normal(0, 0.01, n)
    return np.column_stack([x, y, z])


def synthetic_blob(center, n=300, seed=1):
    rng = np.random.default_rng(seed)
    return np.asarray(center) + rng.normal(0, 0.8, size=(n, 3))


class TestRefineLabels:
    def test_no_vegetation_is_identity(self):
        cloud = make_cloud(synthetic_wall(), [B] * 500)
        out = refine_labels(cloud)
        assert np.array_equal(out.labels, cloud.labels)
        assert np.array_equal(out.points, cloud.points)

    def test_mislabeled_wall_recovered(self):
        # a planar wall wrongly labeled vegetation, isolated
        # from any true vegetation, must come back as building.
        wall = synthetic_wall()
        cloud = make_cloud(wall, [V] * len(wall))
        out = refine_labels(cloud)
        assert np.all(out.labels == B)

    def test_contaminated_blob_recovered(self):
        # a vegetation blob with building-labeled contamination
        # forming one DBSCAN cluster gets fully enclosed as vegetation. The
        # corrupted points are interior (nearest the centroid), so AABB
        # membership holds by construction.
        blob = synthetic_blob([20, 0, 2])
        centroid = blob.mean(axis=0)
        interior = np.argsort(np.linalg.norm(blob - centroid, axis=1))[:30]
        labels = np.full(len(blob), V, dtype=np.uint8)
        labels[interior] = B
        cloud = make_cloud(blob, labels)
        out = refine_labels(cloud)
        assert np.all(out.labels == V)

    def test_only_labels_change(self):
        rng = np.random.default_rng(3)
        xyz = np.vstack([synthetic_wall(seed=4), synthetic_blob([30, 0, 2], seed=5)])
        labels = rng.integers(0, 4, len(xyz)).astype(np.uint8)
        cloud = make_cloud(xyz, labels)
        out = refine_labels(cloud)
        assert np.array_equal(out.points, cloud.points)
        assert len(out) == len(cloud)

    def test_vehicle_count_invariant(self):
        rng = np.random.default_rng(6)
        xyz = np.vstack([synthetic_wall(seed=7), synthetic_blob([25, 5, 2], seed=8)])
        labels = rng.choice([int(B), int(V), int(G), int(N)], len(xyz)).astype(np.uint8)
        cloud = make_cloud(xyz, labels)
        out = refine_labels(cloud)
        assert np.sum(out.labels == G) == np.sum(labels == G)

    def test_wall_and_blob_together(self):
        wall = synthetic_wall(seed=9)
        blob = synthetic_blob([30, 10, 2], seed=10)
        xyz = np.vstack([wall, blob])
        labels = np.concatenate([np.full(len(wall), V), np.full(len(blob), V)])
        interior = np.argsort(np.linalg.norm(blob - blob.mean(axis=0), axis=1))[:30]
        labels[len(wall) + interior] = B  # contamination inside the blob
        out = refine_labels(make_cloud(xyz, labels.astype(np.uint8)))
        assert np.all(out.labels[:len(wall)] == B)       # wall relabeled
        assert np.all(out.labels[len(wall):] == V)       # blob enclosed


class TestHashGrid:
    @pytest.mark.parametrize("seed", range(3))
    def test_query_equals_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        xyz = rng.uniform(-4, 4, size=(300, 3))
        r = float(rng.uniform(0.2, 1.5))
        grid = HashGrid3(xyz, r)
        for _ in range(30):
            q = rng.uniform(-4, 4, size=3)
            brute = np.flatnonzero(np.linalg.norm(xyz - q, axis=1) <= r)
            assert np.array_equal(grid.query(q), brute)

    def test_oversized_query_radius_rejected(self):
        grid = HashGrid3(np.zeros((1, 3)), 1.0)
        with pytest.raises(ValueError):
            grid.query([0, 0, 0], 2.0)
