import numpy as np
import pytest

from rsl import ClassRaster, LabeledCloud, PolarScan, Trajectory
from rsl.fileio import (FileFormatError, read_class_raster, read_cloud,
                        read_imu_csv, read_lpc_raw, read_polar_scan,
                        read_trajectory, write_class_raster, write_cloud,
                        write_imu_csv, write_lpc_raw, write_polar_scan,
                        write_trajectory)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_lpc_round_trip_bit_exact(tmp_path, rng):
    pts = rng.normal(size=(100, 4)).astype(np.float32)
    pts[:, 3] = np.abs(pts[:, 3])
    labels = rng.integers(0, 4, 100).astype(np.uint8)
    cloud = LabeledCloud(pts, labels)
    path = tmp_path / "a.lpc"
    write_cloud(path, cloud)
    back = read_cloud(path)
    assert back.points.tobytes() == cloud.points.tobytes()
    assert np.array_equal(back.labels, cloud.labels)


def test_lpc_raw_allows_16way_ids(tmp_path, rng):
    pts = rng.normal(size=(16, 4)).astype(np.float32)
    ids = np.arange(16, dtype=np.uint8)
    path = tmp_path / "raw.lpc"
    write_lpc_raw(path, pts, ids)
    rpts, rids = read_lpc_raw(path)
    assert np.array_equal(rids, ids)
    assert rpts.tobytes() == pts.tobytes()
    with pytest.raises(FileFormatError):
        read_cloud(path)  # 16-way ids must be consolidated first


def test_lpc_bad_magic(tmp_path):
    path = tmp_path / "bad.lpc"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FileFormatError):
        read_lpc_raw(path)


def test_lpc_truncated(tmp_path):
    path = tmp_path / "t.lpc"
    write_lpc_raw(path, np.zeros((2, 4), np.float32), np.zeros(2, np.uint8))
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(FileFormatError):
        read_lpc_raw(path)


def test_polar_scan_round_trip(tmp_path, rng):
    power = np.abs(rng.normal(size=(32, 64))).astype(np.float32)
    scan = PolarScan(power, 0.25, 12.5)
    path = tmp_path / "s.psc"
    write_polar_scan(path, scan)
    back = read_polar_scan(path)
    assert back.power.tobytes() == scan.power.tobytes()
    assert back.range_resolution == scan.range_resolution
    assert back.timestamp == scan.timestamp


def test_polar_scan_missing_sidecar(tmp_path):
    path = tmp_path / "s.psc"
    path.write_bytes(b"\x00" * 16)
    with pytest.raises(FileFormatError):
        read_polar_scan(path)


def test_class_raster_round_trip(tmp_path, rng):
    channels = rng.uniform(size=(3, 16, 24)) > 0.6
    raster = ClassRaster(channels, 0.5, 3.0)
    path = tmp_path / "r.crs"
    write_class_raster(path, raster)
    back = read_class_raster(path)
    assert np.array_equal(back.channels, raster.channels)
    assert back.range_resolution == raster.range_resolution


def test_raster_size_mismatch_rejected(tmp_path, rng):
    raster = ClassRaster(np.zeros((3, 4, 4), bool), 0.5)
    path = tmp_path / "r.crs"
    write_class_raster(path, raster)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FileFormatError):
        read_class_raster(path)


def test_trajectory_round_trip_exact(tmp_path, rng):
    ts = np.cumsum(rng.uniform(0.01, 0.5, 50))
    poses = rng.normal(size=(50, 3))
    poses[:, 2] = np.clip(poses[:, 2], -3.1, 3.1)
    traj = Trajectory(ts, poses)
    path = tmp_path / "t.csv"
    write_trajectory(path, traj)
    back = read_trajectory(path)
    assert np.array_equal(back.timestamps, traj.timestamps)
    assert np.array_equal(back.poses, traj.poses)


def test_trajectory_header_checked(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("time,x,y,t\n0,0,0,0\n")
    with pytest.raises(FileFormatError):
        read_trajectory(path)


def test_imu_round_trip(tmp_path, rng):
    ts = np.cumsum(rng.uniform(0.01, 0.1, 30))
    wz = rng.normal(size=30)
    path = tmp_path / "imu.csv"
    write_imu_csv(path, ts, wz)
    rts, rwz = read_imu_csv(path)
    assert np.array_equal(rts, ts)
    assert np.array_equal(rwz, wz)
