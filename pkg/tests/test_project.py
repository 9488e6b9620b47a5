import math

import numpy as np
import pytest

from rsl import ClassRaster, LabeledCloud, Pose2, SemanticClass
from rsl.project import (GridSpec, WindowSpec, accumulate_window,
                         bin_center_xy, polar_bins, project_all,
                         rasterize_class)

GRID = GridSpec(36, 40, 0.5)


def cloud_at(xy_list, labels):
    xy = np.asarray(xy_list, dtype=np.float32).reshape(-1, 2)
    pts = np.column_stack([xy, np.zeros((len(xy), 2), np.float32)])
    return LabeledCloud(pts, np.asarray(labels, np.uint8))


def brute_bin(x, y, grid):
    azimuth = math.atan2(y, x) % (2 * math.pi)
    a = int(azimuth / (2 * math.pi) * grid.azimuth_bins) % grid.azimuth_bins
    r = int(math.hypot(x, y) / grid.range_resolution)
    return a, r


class TestRasterize:
    def test_empty_cloud_all_zero(self):
        out = rasterize_class(LabeledCloud.empty(), SemanticClass.BUILDING, GRID)
        assert not out.any()

    def test_single_point_bin_arithmetic(self):
        # oracle: azimuth 0 -> bin 0; range 10 m at 0.5 m/bin -> bin 20
        out = rasterize_class(cloud_at([[10.0, 0.0]], [SemanticClass.BUILDING]),
                              SemanticClass.BUILDING, GRID)
        assert out[0, 20]
        assert out.sum() == 1

    def test_classes_keep_their_own_channels(self):
        cloud = cloud_at([[10.0, 0.0], [10.0, 0.0]],
                         [SemanticClass.BUILDING, SemanticClass.VEHICLE])
        raster = project_all(cloud, GRID)
        assert raster.channel(SemanticClass.BUILDING)[0, 20]
        assert raster.channel(SemanticClass.VEHICLE)[0, 20]
        assert not raster.channel(SemanticClass.VEGETATION).any()

    def test_noise_never_projected(self):
        with pytest.raises(ValueError):
            rasterize_class(LabeledCloud.empty(), SemanticClass.NOISE, GRID)

    def test_noise_only_cloud_gives_empty_raster(self):
        cloud = cloud_at([[5.0, 1.0]], [SemanticClass.NOISE])
        raster = project_all(cloud, GRID)
        assert not raster.channels.any()

    def test_matches_per_point_binning(self):
        rng = np.random.default_rng(11)
        xy = rng.uniform(-15, 15, size=(200, 2))
        labels = rng.integers(0, 4, 200)
        cloud = cloud_at(xy, labels)
        raster = project_all(cloud, GRID)
        expected = np.zeros((3, GRID.azimuth_bins, GRID.range_bins), bool)
        chan = {SemanticClass.BUILDING: 0, SemanticClass.VEHICLE: 1,
                SemanticClass.VEGETATION: 2}
        for (x, y), lab in zip(xy, labels):
            if lab == SemanticClass.NOISE:
                continue
            a, r = brute_bin(float(x), float(y), GRID)
            if r < GRID.range_bins:
                expected[chan[SemanticClass(lab)], a, r] = True
        assert np.array_equal(raster.channels, expected)

    def test_other_classes_do_not_leak(self):
        base = cloud_at([[10.0, 0.0]], [SemanticClass.BUILDING])
        extra = cloud_at([[10.0, 0.0], [8.0, 2.0]],
                         [SemanticClass.BUILDING, SemanticClass.VEHICLE])
        a = rasterize_class(base, SemanticClass.BUILDING, GRID)
        b = rasterize_class(extra, SemanticClass.BUILDING, GRID)
        assert np.array_equal(a, b)

    def test_out_of_range_points_dropped(self):
        cloud = cloud_at([[100.0, 0.0]], [SemanticClass.BUILDING])
        assert not rasterize_class(cloud, SemanticClass.BUILDING, GRID).any()


class TestBinRoundTrip:
    def test_bin_centers_map_back_exhaustively(self):
        grid = GridSpec(12, 10, 0.5)
        aa, rr = np.meshgrid(np.arange(12), np.arange(10), indexing="ij")
        centers = bin_center_xy(aa.ravel(), rr.ravel(), grid)
        a2, r2, ok = polar_bins(centers, grid)
        assert ok.all()
        assert np.array_equal(a2, aa.ravel())
        assert np.array_equal(r2, rr.ravel())

    def test_full_turn_wraps_to_zero(self):
        a, r, ok = polar_bins([[10.0, -1e-12]], GRID)
        assert ok[0] and a[0] in (0, GRID.azimuth_bins - 1)


def raster_from_cells(cells, grid=GRID):
    channels = np.zeros((3, grid.azimuth_bins, grid.range_bins), bool)
    for ch, a, r in cells:
        channels[ch, a, r] = True
    return ClassRaster(channels, grid.range_resolution)


class TestAccumulateWindow:
    def test_empty_window_is_identity(self):
        ref = raster_from_cells([(0, 3, 5)])
        out = accumulate_window(ref, [], WindowSpec(0, 0, ()), GRID)
        assert np.array_equal(out.channels, ref.channels)

    def test_identity_neighbor_unions(self):
        ref = raster_from_cells([(0, 3, 5)])
        nb = raster_from_cells([(0, 9, 11)])
        out = accumulate_window(ref, [nb], WindowSpec(1, 0, (Pose2.identity(),)), GRID)
        assert out.channels[0, 3, 5] and out.channels[0, 9, 11]
        assert out.channels.sum() == 2

    def test_translated_neighbor_geometry(self):
        # neighbor at +10 m x sees a wall 20 m ahead -> ~30 m in the reference;
        # a wall 20 m behind it lands ~10 m behind the reference.
        grid = GridSpec(72, 80, 0.5)
        ahead_bin = int(20.0 / grid.range_resolution)
        neighbor = raster_from_cells([(0, 0, ahead_bin), (0, 36, ahead_bin)], grid)
        ref = ClassRaster.empty(72, 80, 0.5)
        out = accumulate_window(ref, [neighbor],
                                WindowSpec(1, 0, (Pose2(10.0, 0.0, 0.0),)), grid)
        occupied = np.argwhere(out.channels[0])
        ranges = (occupied[:, 1] + 0.5) * grid.range_resolution
        azimuths = occupied[:, 0]
        front = ranges[azimuths < 18]   # azimuth near 0
        back = ranges[np.abs(azimuths - 36) < 18]
        assert len(front) == 1 and abs(front[0] - 30.0) < 1.0
        assert len(back) == 1 and abs(back[0] - 10.0) < 1.0

    def test_monotone(self):
        rng = np.random.default_rng(3)
        ref = ClassRaster(rng.uniform(size=(3, 36, 40)) > 0.8, GRID.range_resolution)
        nb = ClassRaster(rng.uniform(size=(3, 36, 40)) > 0.8, GRID.range_resolution)
        out = accumulate_window(ref, [nb], WindowSpec(1, 0, (Pose2(1.7, -0.4, 0.2),)),
                                GRID)
        assert np.all(out.channels[ref.channels])

    def test_pose_count_mismatch_rejected(self):
        ref = ClassRaster.empty(36, 40, 0.5)
        with pytest.raises(ValueError):
            accumulate_window(ref, [ref], WindowSpec(0, 0, ()), GRID)
