import json

import numpy as np
import pytest

from segtrainer.formats import (FormatError, Grid, read_class_raster,
                                read_polar_scan, write_class_raster)

GRID = Grid(32, 16, 0.5)


def write_scan(path, power, grid=GRID, timestamp=1.5):
    path.write_bytes(np.asarray(power, dtype="<f4").tobytes())
    (path.parent / (path.name + ".json")).write_text(json.dumps({
        "azimuth_bins": grid.azimuth_bins, "range_bins": grid.range_bins,
        "range_resolution_m": grid.range_resolution_m, "timestamp_s": timestamp}))


def test_scan_round_trip(tmp_path):
    power = np.random.default_rng(0).uniform(0, 5, (32, 16)).astype(np.float32)
    write_scan(tmp_path / "a.psc", power)
    back, grid, ts = read_polar_scan(tmp_path / "a.psc")
    assert back.tobytes() == power.tobytes()
    assert grid == GRID and ts == 1.5


def test_scan_size_mismatch(tmp_path):
    write_scan(tmp_path / "a.psc", np.zeros((32, 16), np.float32))
    (tmp_path / "a.psc").write_bytes(b"\x00" * 8)
    with pytest.raises(FormatError):
        read_polar_scan(tmp_path / "a.psc")


def test_missing_sidecar(tmp_path):
    (tmp_path / "a.psc").write_bytes(b"\x00" * 4)
    with pytest.raises(FormatError, match="sidecar"):
        read_polar_scan(tmp_path / "a.psc")


def test_raster_round_trip(tmp_path):
    channels = np.random.default_rng(1).uniform(size=(3, 32, 16)) > 0.7
    write_class_raster(tmp_path / "r.crs", channels, GRID, 2.0)
    back, grid, ts = read_class_raster(tmp_path / "r.crs")
    assert np.array_equal(back, channels)
    assert grid == GRID and ts == 2.0


def test_raster_shape_checked(tmp_path):
    with pytest.raises(FormatError):
        write_class_raster(tmp_path / "r.crs", np.zeros((3, 8, 8), bool), GRID)
