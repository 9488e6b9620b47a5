import math

import numpy as np
import pytest

from rsl import Pose2, se2_compose, se2_inverse, wrap_angle
from rsl.odom import (ImuCoverageError, ImuStream, KeyframeBuffer, OdomConfig,
                      OspSet, RadarOdometry, compute_osp, integrate_imu_yaw,
                      point_to_line_residual_jacobian, register)
from rsl.project import GridSpec
from rsl.radar import RadarPointSet
from rsl.synthworld import (generate_trajectory, make_street_scene,
                            simulate_radar)

GRID = GridSpec(720, 120, 0.25)


def point_set_from_xy(xy):
    """Nearest-bin radar points for hand-built geometry."""
    xy = np.asarray(xy, dtype=np.float64)
    from rsl.project import polar_bins
    a, r, ok = polar_bins(xy, GRID)
    return RadarPointSet.from_bins(GRID, a[ok], r[ok], np.full(ok.sum(), 30.0))


class TestComputeOsp:
    def test_horizontal_line_normal(self):
        xy = np.column_stack([np.linspace(0.1, 2.9, 10), np.full(10, 6.0)])
        osp = compute_osp(xy, cell_size=3.0, min_cell_points=4)
        assert len(osp) == 1
        assert abs(abs(osp.normals[0][1]) - 1.0) < 1e-9

    def test_vertical_line_normal_oriented_to_origin(self):
        xy = np.column_stack([np.full(10, 3.0), np.linspace(0.05, 2.9, 10)])
        osp = compute_osp(xy, cell_size=3.0, min_cell_points=4)
        assert len(osp) == 1
        assert osp.normals[0][0] == pytest.approx(-1.0, abs=1e-9)

    def test_isotropic_cell_skipped(self):
        rng = np.random.default_rng(12)  # seed chosen so the eig ratio < 1.5
        xy = np.array([20.0, 20.0]) + rng.normal(0, 0.5, size=(200, 2))
        lam = np.sort(np.linalg.eigvalsh(np.cov(xy.T)))
        assert lam[1] / lam[0] < 1.5  # oracle: the cell really is isotropic
        osp = compute_osp(xy, cell_size=40.0, min_cell_points=4)
        assert len(osp) == 0

    def test_min_cell_points_respected(self):
        xy = np.column_stack([np.linspace(10, 11, 3), np.full(3, 5.0)])
        assert len(compute_osp(xy, 3.0, min_cell_points=4)) == 0

    def test_weight_counts_members(self):
        xy = np.column_stack([np.linspace(0.1, 2.9, 7), np.full(7, 6.0)])
        osp = compute_osp(xy, cell_size=3.0, min_cell_points=4)
        assert osp.weights.tolist() == [7.0]

    def test_scalar_point_view_round_trips(self):
        xy = np.column_stack([np.linspace(0.1, 2.9, 7), np.full(7, 6.0)])
        osp = compute_osp(xy, cell_size=3.0, min_cell_points=4)
        points = [osp.point(i) for i in range(len(osp))]
        assert all(abs(np.linalg.norm(p.normal) - 1.0) < 1e-9 for p in points)
        back = OspSet.from_points(points)
        assert np.array_equal(back.means, osp.means)
        assert np.array_equal(back.weights, osp.weights)

    def test_accepts_radar_point_set(self):
        scan_xy = np.column_stack([np.linspace(10.0, 14.0, 30), np.full(30, 0.0)])
        from rsl.project import polar_bins
        a, r, ok = polar_bins(scan_xy, GRID)
        pts = RadarPointSet.from_bins(GRID, a[ok], r[ok], np.full(int(ok.sum()), 30.0))
        osp = compute_osp(pts, cell_size=3.0, min_cell_points=4)
        assert len(osp) >= 1
        assert abs(abs(osp.normals[0][1]) - 1.0) < 0.05


def two_wall_features():
    """Clean oriented surface points on two perpendicular walls."""
    xs = np.arange(2.0, 14.0, 0.5)
    wall_a = np.column_stack([xs, np.full(len(xs), 5.0)])     # y = 5
    ys = np.arange(-4.0, 4.0, 0.5)
    wall_b = np.column_stack([np.full(len(ys), 8.0), ys])     # x = 8
    means = np.vstack([wall_a, wall_b])
    normals = np.vstack([np.tile([0.0, -1.0], (len(xs), 1)),
                         np.tile([-1.0, 0.0], (len(ys), 1))])
    weights = np.full(len(means), 4.0)
    return OspSet(means, normals, weights)


def transformed_src(features: OspSet, true_pose: Pose2) -> OspSet:
    """Features as seen from a sensor at true_pose (world -> sensor frame)."""
    return features.transformed(se2_inverse(true_pose))


class TestRegister:
    def test_fixed_point(self):
        feats = two_wall_features()
        buf = KeyframeBuffer(5)
        buf.push(Pose2.identity(), feats)
        res = register(feats, buf, Pose2.identity())
        assert res.converged
        assert abs(res.pose.x) < 1e-9 and abs(res.pose.y) < 1e-9
        assert res.residual < 1e-9

    def test_translation_recovery(self):
        feats = two_wall_features()
        buf = KeyframeBuffer(5)
        buf.push(Pose2.identity(), feats)
        true = Pose2(0.5, 0.0, 0.0)
        res = register(transformed_src(feats, true), buf, Pose2.identity())
        assert res.converged
        assert res.pose.x == pytest.approx(0.5, abs=1e-3)
        assert res.pose.y == pytest.approx(0.0, abs=1e-3)

    def test_rotation_recovery(self):
        feats = two_wall_features()
        buf = KeyframeBuffer(5)
        buf.push(Pose2.identity(), feats)
        true = Pose2(0.0, 0.0, math.radians(-5.0))
        res = register(transformed_src(feats, true), buf, Pose2.identity())
        assert res.converged
        assert math.degrees(res.pose.theta) == pytest.approx(-5.0, abs=0.05)

    @pytest.mark.parametrize("seed", range(20))
    def test_perturbation_recovery(self, seed):
        rng = np.random.default_rng(seed)
        feats = two_wall_features()
        buf = KeyframeBuffer(5)
        buf.push(Pose2.identity(), feats)
        true = Pose2(rng.uniform(-1, 1), rng.uniform(-1, 1),
                     math.radians(rng.uniform(-10, 10)))
        res = register(transformed_src(feats, true), buf, Pose2.identity())
        assert res.converged
        assert math.hypot(res.pose.x - true.x, res.pose.y - true.y) < 1e-3
        assert abs(math.degrees(wrap_angle(res.pose.theta - true.theta))) < 0.05

    def test_too_few_matches_returns_guess(self):
        feats = two_wall_features()
        buf = KeyframeBuffer(5)
        buf.push(Pose2.identity(), feats)
        far = OspSet(np.array([[500.0, 500.0]]), np.array([[0.0, 1.0]]), np.array([4.0]))
        guess = Pose2(1.0, 2.0, 0.3)
        res = register(far, buf, guess)
        assert not res.converged
        assert res.pose == guess
        assert math.isinf(res.residual)

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(5)
        feats = two_wall_features()
        noisy = OspSet(feats.means + rng.normal(0, 0.05, feats.means.shape),
                       feats.normals, feats.weights)
        buf = KeyframeBuffer(5)
        buf.push(Pose2.identity(), noisy)
        true = Pose2(0.4, -0.3, 0.1)
        res = register(transformed_src(feats, true), buf, Pose2.identity())
        for before, after in res.objective_trace:
            assert after <= before * (1 + 1e-9) + 1e-9

    def test_left_invariance_conjugation(self):
        # applying a rigid G to both src and target conjugates the result
        rng = np.random.default_rng(8)
        feats = two_wall_features()
        true = Pose2(0.3, -0.2, math.radians(4.0))
        src = transformed_src(feats, true)
        buf = KeyframeBuffer(5)
        buf.push(Pose2.identity(), feats)
        base = register(src, buf, Pose2.identity())
        assert base.converged
        for _ in range(5):
            g = Pose2(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3, 3))
            buf_g = KeyframeBuffer(5)
            buf_g.push(g, feats)           # target features become G * q
            src_g = src.transformed(g)     # source features become G * p
            expected = se2_compose(g, se2_compose(base.pose, se2_inverse(g)))
            res = register(src_g, buf_g, expected)
            assert res.converged
            assert math.hypot(res.pose.x - expected.x, res.pose.y - expected.y) < 1e-6
            assert abs(wrap_angle(res.pose.theta - expected.theta)) < 1e-6


class TestJacobian:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        pose = Pose2(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3, 3))
        src = rng.uniform(-10, 10, size=(12, 2))
        tgt = rng.uniform(-10, 10, size=(12, 2))
        nrm = rng.normal(size=(12, 2))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        _, jac = point_to_line_residual_jacobian(pose, src, tgt, nrm)
        h = 1e-6
        for k, delta in enumerate(np.eye(3) * h):
            pp = Pose2(pose.x + delta[0], pose.y + delta[1], pose.theta + delta[2])
            pm = Pose2(pose.x - delta[0], pose.y - delta[1], pose.theta - delta[2])
            ep, _ = point_to_line_residual_jacobian(pp, src, tgt, nrm)
            em, _ = point_to_line_residual_jacobian(pm, src, tgt, nrm)
            fd = (ep - em) / (2 * h)
            scale = np.maximum(np.abs(jac[:, k]), 1.0)
            assert np.max(np.abs(fd - jac[:, k]) / scale) < 1e-5


class TestImuIntegration:
    def test_zero_stream(self):
        imu = ImuStream(np.linspace(0, 5, 51), np.zeros(51))
        assert integrate_imu_yaw(imu, 0.5, 4.5) == 0.0

    def test_constant_rate(self):
        imu = ImuStream(np.linspace(0, 2, 41), np.full(41, 0.1))
        assert integrate_imu_yaw(imu, 0.0, 2.0) == pytest.approx(0.2)

    def test_linear_ramp_exact(self):
        # trapezoid integrates a linear ramp exactly: mean rate 0.1 over 2 s
        t = np.linspace(0, 2, 41)
        imu = ImuStream(t, 0.1 * t)
        assert integrate_imu_yaw(imu, 0.0, 2.0) == pytest.approx(0.2, abs=1e-12)

    def test_gap_detected(self):
        t = np.array([0.0, 0.05, 0.5, 0.55, 0.6])
        imu = ImuStream(t, np.zeros(5))
        with pytest.raises(ImuCoverageError):
            integrate_imu_yaw(imu, 0.0, 0.6)

    def test_interval_not_covered(self):
        imu = ImuStream(np.linspace(1.0, 2.0, 21), np.zeros(21))
        with pytest.raises(ImuCoverageError):
            integrate_imu_yaw(imu, 0.5, 1.5)

    def test_requires_ordered_interval(self):
        imu = ImuStream(np.linspace(0, 1, 21), np.zeros(21))
        with pytest.raises(ValueError):
            integrate_imu_yaw(imu, 0.8, 0.2)


def street_scan_sequence(kind="straight", length=60.0, seed=1, turn_duration=None,
                         clutter=False):
    traj, imu = generate_trajectory(kind, length, 5.0, 0.2, turn_duration=turn_duration)
    kwargs = dict(vegetation_every=12.0, n_vehicles=6, vehicle_speed=5.0) if clutter else {}
    scene = make_street_scene(traj, seed=seed, **kwargs)
    scans = [simulate_radar(scene, traj.pose(i), GRID, frame=i,
                            time=float(traj.timestamps[i]),
                            timestamp=float(traj.timestamps[i]))
             for i in range(len(traj))]
    return traj, imu, scans


class TestOdometryPipeline:
    def test_stationary_sequence(self):
        from rsl.synthworld import RadarNoiseSpec
        traj, _, _ = street_scan_sequence()
        scene = make_street_scene(traj, seed=3)
        noise = RadarNoiseSpec(range_noise=0.0)
        od = RadarOdometry(OdomConfig(min_power=20.0))
        poses = []
        for i in range(8):
            scan = simulate_radar(scene, Pose2.identity(), GRID, noise, frame=i,
                                  time=0.0, timestamp=i * 0.2)
            poses.append(od.step(scan).pose)
        for prev, cur in zip(poses, poses[1:]):
            assert math.hypot(cur.x - prev.x, cur.y - prev.y) < 1e-2

    def test_straight_street_drift(self):
        traj, _, scans = street_scan_sequence(length=60.0, seed=1)
        od = RadarOdometry(OdomConfig(min_power=20.0))
        est = [od.step(s).pose for s in scans]
        final_err = math.hypot(est[-1].x - traj.poses[-1, 0],
                               est[-1].y - traj.poses[-1, 1])
        assert final_err < 0.005 * 60.0

    def test_imu_reduces_heading_error_after_turn(self):
        # paired runs on clutter scenes with one hard 90 degree corner; the
        # acceptance suite repeats this over 10 seeds
        errors = imu_turn_heading_errors(seeds=(301, 302, 303))
        assert np.mean(errors[True]) < np.mean(errors[False])


def imu_turn_heading_errors(seeds):
    """Paired heading errors just after the first sharp corner."""
    errors = {True: [], False: []}
    for seed in seeds:
        traj, imu = generate_trajectory("square-loop", 120.0, 5.0, 0.2,
                                        turn_duration=0.8)
        scene = make_street_scene(traj, seed=seed, offset_range=(10.0, 16.0),
                                  vegetation_every=12.0, n_vehicles=6,
                                  vehicle_speed=5.0)
        quarter = len(traj) // 4 + 3
        scans = [simulate_radar(scene, traj.pose(i), GRID, frame=i,
                                time=float(traj.timestamps[i]),
                                timestamp=float(traj.timestamps[i]))
                 for i in range(quarter + 1)]
        for use_imu in (False, True):
            od = RadarOdometry(OdomConfig(min_power=20.0),
                               imu=imu if use_imu else None)
            est = [od.step(s).pose for s in scans]
            err = abs(wrap_angle(est[quarter].theta - traj.poses[quarter, 2]))
            errors[use_imu].append(math.degrees(err))
    return errors

    def test_keyframe_buffer_caps(self):
        buf = KeyframeBuffer(3)
        feats = two_wall_features()
        for i in range(6):
            buf.push(Pose2(float(i), 0, 0), feats)
        assert len(buf) == 3
        assert buf.keyframes[0].pose.x == 3.0
