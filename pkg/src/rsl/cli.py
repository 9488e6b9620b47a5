"""`rsl` command line: per-stage tools plus whole-pipeline runs.

Exit codes: 0 success, 2 validation/config error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import math
import struct
import sys
from pathlib import Path

import numpy as np

from . import fileio, metrics
from .odom import ImuStream
from .osmloc import LocalizationConfig, WallMap, localize_sequence, parse_osm
from .pipeline import (ConfigError, MASK_MODES, StageError, _odom_config,
                       ablation, format_ablation_table, run_odometry_sequence,
                       run_pipeline)
from .preprocess import (Extrinsic, FovSpec, LabelMap16to4, align_to_radar,
                         consolidate_labels, fov_filter, remove_ground)
from .project import GridSpec, WindowSpec, accumulate_window, project_all
from .radar import MaskMode, RadarPointSet, apply_semantic_mask, k_strongest, mse
from .refine import RefineParams, RefineReport, refine_labels
from .synthworld import SceneSpec, generate_trajectory, ground_truth_raster, \
    scene_to_osm_xml, simulate_lidar, simulate_radar, CorruptionSpec, LidarSpec
from .types import SemanticClass

RPS_MAGIC = b"RPS1"


def write_rps(path, points: RadarPointSet) -> None:
    with open(path, "wb") as f:
        f.write(RPS_MAGIC)
        f.write(struct.pack("<IIdI", points.grid.azimuth_bins,
                            points.grid.range_bins,
                            points.grid.range_resolution, len(points)))
        has_classes = points.classes is not None
        f.write(struct.pack("<B", 1 if has_classes else 0))
        f.write(points.azimuth_bin.astype("<u4").tobytes())
        f.write(points.range_bin.astype("<u4").tobytes())
        f.write(points.power.astype("<f4").tobytes())
        if has_classes:
            f.write(points.classes.astype("u1").tobytes())


def read_rps(path) -> RadarPointSet:
    data = Path(path).read_bytes()
    if data[:4] != RPS_MAGIC:
        raise fileio.FileFormatError(f"{path}: bad magic {data[:4]!r}")
    a_bins, r_bins, res, count = struct.unpack_from("<IIdI", data, 4)
    (has_classes,) = struct.unpack_from("<B", data, 24)
    off = 25
    a = np.frombuffer(data, "<u4", count, off).astype(np.int64)
    off += 4 * count
    r = np.frombuffer(data, "<u4", count, off).astype(np.int64)
    off += 4 * count
    p = np.frombuffer(data, "<f4", count, off).astype(np.float64)
    off += 4 * count
    classes = np.frombuffer(data, "u1", count, off) if has_classes else None
    pts = RadarPointSet.from_bins(GridSpec(a_bins, r_bins, res), a, r, p)
    if classes is not None:
        pts = RadarPointSet(pts.grid, pts.azimuth_bin, pts.range_bin,
                            pts.power, pts.xy, classes)
    return pts


def _load_extrinsic(path) -> Extrinsic:
    doc = json.loads(Path(path).read_text())
    if "rotation" in doc:
        return Extrinsic(np.array(doc["rotation"]),
                         np.array(doc.get("translation_m", doc.get("translation", [0, 0, 0]))))
    return Extrinsic.from_yaw_translation(
        math.radians(float(doc.get("yaw_deg", 0.0))),
        np.array(doc.get("translation_m", doc.get("translation", [0, 0, 0]))))


def _load_grid(path) -> GridSpec:
    doc = json.loads(Path(path).read_text())
    return GridSpec(int(doc["azimuth_bins"]), int(doc["range_bins"]),
                    float(doc["range_resolution_m"]))


def _parse_lengths(text: str) -> list:
    if ":" in text:
        start, stop, step = (int(v) for v in text.split(":"))
        return list(range(start, stop + 1, step))
    return [int(v) for v in text.split(",")]


def cmd_preprocess(args) -> int:
    cloud_pts, ids = fileio.read_lpc_raw(args.input)
    if args.labelmap:
        label_map = LabelMap16to4(json.loads(Path(args.labelmap).read_text()))
        cloud = consolidate_labels(cloud_pts, [str(i) for i in ids], label_map)
    else:
        if ids.size and ids.max() > 3:
            raise ConfigError("input has raw ids > 3; provide --labelmap")
        from .types import LabeledCloud
        cloud = LabeledCloud(cloud_pts, ids)
    extrinsic = _load_extrinsic(args.extrinsic) if args.extrinsic else Extrinsic.identity()
    cloud = align_to_radar(cloud, extrinsic)
    if not args.no_ground:
        cloud = remove_ground(cloud, args.ground_cell, args.ground_margin)
    spec = FovSpec(math.radians(args.fov_deg), args.min_range, args.max_range)
    cloud = fov_filter(cloud, spec)
    fileio.write_cloud(args.output, cloud)
    print(f"{len(cloud)} points -> {args.output}")
    return 0


def cmd_refine(args) -> int:
    params = RefineParams(**json.loads(Path(args.params).read_text())) \
        if args.params else RefineParams()
    cloud = fileio.read_cloud(args.input)
    report = RefineReport()
    refined = refine_labels(cloud, params, report)
    fileio.write_cloud(args.output, refined)
    if args.report:
        Path(args.report).write_text(json.dumps({
            "clusters": report.clusters,
            "boxes_applied": report.boxes_applied,
            "pass1_relabeled_to_vegetation": report.enclosed_to_vegetation,
            "pass2_relabeled_to_building": report.vegetation_to_building,
            "transitions": report.transitions,
        }, sort_keys=True) + "\n")
    print(f"pass1 -> vegetation: {report.enclosed_to_vegetation}, "
          f"pass2 -> building: {report.vegetation_to_building}")
    return 0


def cmd_project(args) -> int:
    grid = _load_grid(args.grid)
    cloud = fileio.read_cloud(args.input)
    raster = project_all(cloud, grid)
    if args.window > 0:
        if not args.poses:
            raise ConfigError("--window needs --poses traj.csv")
        traj = fileio.read_trajectory(args.poses)
        stem = Path(args.input).stem
        digits = "".join(ch for ch in stem if ch.isdigit())
        if not digits:
            raise ConfigError("--window needs numbered frame files (frame_0007.lpc)")
        idx = int(digits)
        neighbors, poses = [], []
        from .types import se2_delta
        for j in range(max(0, idx - args.window), idx):
            neighbor_path = Path(args.input).with_name(
                stem.replace(digits, f"{j:0{len(digits)}d}") + ".lpc")
            if not neighbor_path.exists():
                continue
            ncloud = fileio.read_cloud(neighbor_path)
            neighbors.append(project_all(ncloud, grid))
            poses.append(se2_delta(traj.pose(idx), traj.pose(j)))
        raster = accumulate_window(raster, neighbors,
                                   WindowSpec(len(poses), 0, tuple(poses)), grid)
    fileio.write_class_raster(args.output, raster)
    print(f"raster with {int(raster.channels.sum())} occupied cells -> {args.output}")
    return 0


def cmd_radar_filter(args) -> int:
    scan = fileio.read_polar_scan(args.scan)
    pts = k_strongest(scan, args.k, args.min_power)
    write_rps(args.output, pts)
    print(f"{len(pts)} points -> {args.output}")
    return 0


def cmd_radar_mask(args) -> int:
    pts = read_rps(args.input)
    raster = fileio.read_class_raster(args.raster)
    mode = MASK_MODES.get(args.mode.lower())
    if mode is None:
        raise ConfigError(f"unknown mode {args.mode!r}")
    out = apply_semantic_mask(pts, raster, mode, args.dilation)
    write_rps(args.output, out)
    print(f"{len(out)}/{len(pts)} points kept -> {args.output}")
    return 0


def cmd_radar_mse(args) -> int:
    a = fileio.read_polar_scan(args.a)
    b = fileio.read_polar_scan(args.b)
    print(f"{mse(a, b):.6f}")
    return 0


def _load_frame_series(directory: Path, suffix: str):
    files = sorted(Path(directory).glob(f"*{suffix}"))
    if not files:
        raise ConfigError(f"no {suffix} files in {directory}")
    return files


def cmd_odom(args) -> int:
    scan_files = _load_frame_series(args.scans, ".psc")
    scans = [fileio.read_polar_scan(f) for f in scan_files]
    rasters = None
    mode = MASK_MODES.get(args.mode.lower())
    if mode is None:
        raise ConfigError(f"unknown mode {args.mode!r}")
    if mode != MaskMode.NONE_REMOVED:
        if not args.rasters:
            raise ConfigError(f"mode {args.mode} needs --rasters")
        raster_files = _load_frame_series(args.rasters, ".crs")
        if len(raster_files) != len(scan_files):
            raise ConfigError("scan and raster counts differ")
        rasters = [fileio.read_class_raster(f) for f in raster_files]
    imu = None
    if args.imu:
        ts, wz = fileio.read_imu_csv(args.imu)
        imu = ImuStream(ts, wz)
    config = _odom_config({"mode": args.mode, "k_strongest": args.k,
                           "min_power": args.min_power, "keyframes": args.keyframes})
    traj, report = run_odometry_sequence(scans, rasters, config, imu)
    fileio.write_trajectory(args.out, traj)
    if args.report:
        Path(args.report).write_text(json.dumps(report, sort_keys=True) + "\n")
    print(f"{len(traj)} poses -> {args.out}")
    return 0


def cmd_locate(args) -> int:
    lat, lon = (float(v) for v in args.origin.split(","))
    wall_map = WallMap(parse_osm(args.map, lat, lon))
    scans = [fileio.read_polar_scan(f) for f in _load_frame_series(args.scans, ".psc")]
    rasters = [fileio.read_class_raster(f)
               for f in _load_frame_series(args.rasters, ".crs")]
    odom = fileio.read_trajectory(args.odom)
    gt = fileio.read_trajectory(args.gt) if args.gt else None
    cfg = LocalizationConfig(k_strongest=args.k, min_power=args.min_power,
                             initial_pose=gt.pose(0) if gt is not None else None)
    est, report = localize_sequence(scans, rasters, odom, wall_map, cfg,
                                    ground_truth=gt)
    fileio.write_trajectory(args.out, est)
    if args.report:
        Path(args.report).write_text(json.dumps(report, sort_keys=True) + "\n")
    if "ape_m" in report:
        print(f"APE {report['ape_m']:.3f} m over {len(est)} frames -> {args.out}")
    else:
        print(f"{len(est)} poses -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    scene = SceneSpec.from_json(json.loads(Path(args.scene).read_text()))
    grid = _load_grid(args.grid) if args.grid else GridSpec(720, 120, 0.25)
    traj, imu = generate_trajectory(args.traj, args.length, args.speed, args.dt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_trajectory(out / "gt.csv", traj)
    fileio.write_imu_csv(out / "imu.csv", imu.timestamps, imu.yaw_rates)
    (out / "map.osm").write_text(scene_to_osm_xml(scene))
    lidar = LidarSpec()
    corruption = CorruptionSpec(args.corrupt_b2v, args.corrupt_v2b)
    for i in range(len(traj)):
        t = float(traj.timestamps[i])
        pose = traj.pose(i)
        cloud, gt_labels = simulate_lidar(scene, pose, lidar, corruption, frame=i, time=t)
        fileio.write_cloud(out / f"frame_{i:04d}.lpc", cloud)
        fileio.write_cloud(out / f"frame_{i:04d}.gt.lpc", cloud.with_labels(gt_labels))
        fileio.write_polar_scan(out / f"frame_{i:04d}.psc",
                                simulate_radar(scene, pose, grid, frame=i,
                                               time=t, timestamp=t))
        fileio.write_class_raster(out / f"frame_{i:04d}.crs",
                                  ground_truth_raster(scene, pose, grid,
                                                      time=t, timestamp=t))
    print(f"{len(traj)} frames -> {out}")
    return 0


def cmd_eval_drift(args) -> int:
    est = fileio.read_trajectory(args.est)
    gt = fileio.read_trajectory(args.gt)
    lengths = _parse_lengths(args.lengths)
    drift = metrics.kitti_drift(est, gt, lengths)
    result = {"translation_error_pct": drift.translation_error,
              "rotation_error_deg_per_100m": drift.rotation_error,
              "per_length": {str(k): v for k, v in drift.per_length.items()}}
    print(f"translation {drift.translation_error:.3f} %  "
          f"rotation {drift.rotation_error:.3f} deg/100m")
    if args.report:
        Path(args.report).write_text(json.dumps(result, sort_keys=True) + "\n")
    if args.plot:
        metrics.plot_drift_bars(args.plot, drift)
    return 0


def cmd_eval_ape(args) -> int:
    est = fileio.read_trajectory(args.est)
    gt = fileio.read_trajectory(args.gt)
    value = metrics.ape(est, gt)
    print(f"APE {value:.3f} m")
    if args.report:
        Path(args.report).write_text(json.dumps({"ape_m": value}) + "\n")
    if args.plot:
        metrics.plot_trajectories(args.plot, {"ground truth": gt, "estimate": est})
    return 0


def cmd_eval_iou(args) -> int:
    pred = fileio.read_class_raster(args.pred)
    gt = fileio.read_class_raster(args.gt)
    cls = {"building": SemanticClass.BUILDING, "vehicle": SemanticClass.VEHICLE,
           "vegetation": SemanticClass.VEGETATION}.get(args.cls.lower())
    if cls is None:
        raise ConfigError(f"unknown class {args.cls!r}")
    value = metrics.iou(pred.channel(cls), gt.channel(cls))
    print(f"IoU[{args.cls}] {value:.4f}")
    if args.report:
        Path(args.report).write_text(json.dumps({f"iou_{args.cls}": value}) + "\n")
    return 0


def cmd_run(args) -> int:
    config = json.loads(Path(args.config).read_text())
    manifest = run_pipeline(config, Path(args.config).parent)
    print(f"stages {manifest['stages_run']} -> "
          f"{len(manifest['files'])} files in {config['out_dir']}")
    return 0


def cmd_ablation(args) -> int:
    config = json.loads(Path(args.config).read_text())
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    imu_flags = [v.strip().lower() in ("on", "true", "1", "yes")
                 for v in args.imu.split(",") if v.strip()]
    table = ablation(config, modes, imu_flags, Path(args.config).parent)
    print(format_ablation_table(table))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsl",
                                     description="radar semantic localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="align, remove ground, FOV-filter a cloud")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--extrinsic", help="JSON extrinsic (rotation/translation or yaw_deg)")
    p.add_argument("--fov-deg", type=float, required=True,
                   help="radar vertical half FOV in degrees (no default)")
    p.add_argument("--min-range", type=float, default=0.0)
    p.add_argument("--max-range", type=float, default=math.inf)
    p.add_argument("--labelmap", help="JSON source-id -> class map for raw clouds")
    p.add_argument("--ground-cell", type=float, default=1.0)
    p.add_argument("--ground-margin", type=float, default=0.3)
    p.add_argument("--no-ground", action="store_true", help="skip ground removal")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("refine", help="run label refinement on a cloud")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--params", help="JSON RefineParams overrides")
    p.add_argument("--report", help="write relabel counts to this JSON file")
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("project", help="rasterize a cloud onto the polar grid")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--grid", required=True, help="JSON grid spec")
    p.add_argument("--window", type=int, default=0, help="past frames to accumulate")
    p.add_argument("--poses", help="trajectory CSV for window accumulation")
    p.set_defaults(fn=cmd_project)

    p = sub.add_parser("radar", help="radar point operations")
    rsub = p.add_subparsers(dest="radar_command", required=True)
    q = rsub.add_parser("filter", help="k-strongest point extraction")
    q.add_argument("scan")
    q.add_argument("output")
    q.add_argument("--k", type=int, default=12)
    q.add_argument("--min-power", type=float, default=0.0)
    q.set_defaults(fn=cmd_radar_filter)
    q = rsub.add_parser("mask", help="semantic masking of radar points")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--mode", required=True)
    q.add_argument("--raster", required=True)
    q.add_argument("--dilation", type=int, default=1)
    q.set_defaults(fn=cmd_radar_mask)
    q = rsub.add_parser("mse", help="mean squared error between two scans")
    q.add_argument("a")
    q.add_argument("b")
    q.set_defaults(fn=cmd_radar_mse)

    p = sub.add_parser("odom", help="radar odometry over a scan directory")
    p.add_argument("--mode", default="none")
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--min-power", type=float, default=0.0)
    p.add_argument("--keyframes", type=int, default=10)
    p.add_argument("--imu", help="IMU CSV (timestamp_s,yaw_rate_rad_s)")
    p.add_argument("--scans", required=True)
    p.add_argument("--rasters")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_odom)

    p = sub.add_parser("locate", help="OSM building-footprint localization")
    p.add_argument("--map", required=True)
    p.add_argument("--origin", required=True, help="lat,lon of the local origin")
    p.add_argument("--scans", required=True)
    p.add_argument("--rasters", required=True)
    p.add_argument("--odom", required=True)
    p.add_argument("--gt")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--min-power", type=float, default=0.0)
    p.set_defaults(fn=cmd_locate)

    p = sub.add_parser("synth", help="render a synthetic scene sequence")
    p.add_argument("--scene", required=True)
    p.add_argument("--traj", default="square-loop",
                   choices=["straight", "square-loop", "s-curve"])
    p.add_argument("--length", type=float, default=300.0)
    p.add_argument("--speed", type=float, default=5.0)
    p.add_argument("--dt", type=float, default=0.2)
    p.add_argument("--grid", help="JSON grid spec")
    p.add_argument("--corrupt-b2v", type=float, default=0.0)
    p.add_argument("--corrupt-v2b", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("eval", help="metrics and plots")
    esub = p.add_subparsers(dest="eval_command", required=True)
    q = esub.add_parser("drift", help="KITTI-style drift")
    q.add_argument("est")
    q.add_argument("gt")
    q.add_argument("--lengths", default="10:80:10",
                   help="start:stop:step in meters, or comma list")
    q.add_argument("--report")
    q.add_argument("--plot")
    q.set_defaults(fn=cmd_eval_drift)
    q = esub.add_parser("ape", help="average position error")
    q.add_argument("est")
    q.add_argument("gt")
    q.add_argument("--report")
    q.add_argument("--plot")
    q.set_defaults(fn=cmd_eval_ape)
    q = esub.add_parser("iou", help="raster channel IoU")
    q.add_argument("pred")
    q.add_argument("gt")
    q.add_argument("--class", dest="cls", required=True)
    q.add_argument("--report")
    q.set_defaults(fn=cmd_eval_iou)

    p = sub.add_parser("run", help="run the configured pipeline")
    p.add_argument("config")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("ablation", help="mask-mode x imu odometry comparison")
    p.add_argument("config")
    p.add_argument("--modes", default="none,vehicle,building")
    p.add_argument("--imu", default="on,off")
    p.set_defaults(fn=cmd_ablation)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except StageError as err:
        print(f"stage failure: {err}", file=sys.stderr)
        return 3
    except (fileio.FileFormatError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
