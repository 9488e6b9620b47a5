"""Experiment orchestration: one JSON config drives synth -> preprocess ->
refine -> project -> odom -> locate -> eval, with a content-hash manifest for
reproducibility. Reruns on identical config and inputs are bit-identical.

Frame-parallel stages fan out over a thread pool sized by the `workers`
config (default 1); every frame writes only its own files, so the outputs
are identical regardless of worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio, metrics
from .odom import ImuStream, OdomConfig, RadarOdometry
from .osmloc import LocalizationConfig, WallMap, localize_sequence, parse_osm
from .preprocess import (Extrinsic, FovSpec, align_to_radar,
                         fov_retained_mask, ground_mask)
from .project import GridSpec, WindowSpec, accumulate_window, project_all
from .radar import MaskMode
from .refine import RefineParams, RefineReport, refine_labels
from .synthworld import (CorruptionSpec, LidarSpec, RadarNoiseSpec, SceneSpec,
                         generate_trajectory, ground_truth_raster,
                         make_street_scene, scene_to_osm_xml, simulate_lidar,
                         simulate_radar)
from .types import Trajectory, se2_delta

ALL_STAGES = ("synth", "preprocess", "refine", "project", "odom", "locate", "eval")

MASK_MODES = {
    "none": MaskMode.NONE_REMOVED,
    "none-removed": MaskMode.NONE_REMOVED,
    "vehicle": MaskMode.VEHICLE_REMOVED,
    "vehicle-removed": MaskMode.VEHICLE_REMOVED,
    "building": MaskMode.ONLY_BUILDING,
    "only-building": MaskMode.ONLY_BUILDING,
}


class ConfigError(ValueError):
    """Configuration failed validation (CLI exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (CLI exit code 3)."""

    def __init__(self, stage: str, message: str, frame: int | None = None):
        super().__init__(f"stage {stage}: {message}"
                         + (f" (frame {frame})" if frame is not None else ""))
        self.stage = stage
        self.frame = frame


def validate_config(config: dict, base: Path) -> dict:
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    stages = config.get("stages", list(ALL_STAGES))
    unknown = [s for s in stages if s not in ALL_STAGES]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; valid: {list(ALL_STAGES)}")
    if "out_dir" not in config:
        raise ConfigError("config needs an out_dir")
    synth = config.get("synth", {})
    scene_file = synth.get("scene_file")
    if scene_file is not None and not (base / scene_file).exists():
        raise ConfigError(f"scene_file {scene_file} does not exist")
    for key in ("scans_dir", "rasters_dir", "map_file", "odometry_file", "imu_file"):
        for section in ("odom", "locate"):
            ref = config.get(section, {}).get(key)
            if ref is not None and not (base / ref).exists():
                raise ConfigError(f"{section}.{key} {ref} does not exist")
    out = dict(config)
    out["stages"] = list(stages)
    return out


def _grid_from(cfg: dict) -> GridSpec:
    return GridSpec(int(cfg.get("azimuth_bins", 720)),
                    int(cfg.get("range_bins", 120)),
                    float(cfg.get("range_resolution_m", 0.25)))


def _build_scene(synth_cfg: dict, base: Path, traj: Trajectory, seed: int) -> SceneSpec:
    if "scene_file" in synth_cfg:
        return SceneSpec.from_json(json.loads((base / synth_cfg["scene_file"]).read_text()))
    if "scene" in synth_cfg:
        return SceneSpec.from_json(synth_cfg["scene"])
    street = dict(synth_cfg.get("street", {}))
    street.setdefault("seed", seed)
    return make_street_scene(traj, **street)


@dataclass
class PipelineData:
    """In-memory handles shared between stages within one run."""

    grid: GridSpec | None = None
    scene: SceneSpec | None = None
    gt: Trajectory | None = None
    imu: ImuStream | None = None
    frames: int = 0


def frame_name(i: int, suffix: str) -> str:
    return f"frame_{i:04d}{suffix}"


def map_frames(fn, frames: int, workers: int = 1) -> list:
    """Apply fn(i) for every frame index, optionally on a thread pool;
    results come back in frame order either way."""
    if workers <= 1:
        return [fn(i) for i in range(frames)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(frames)))


def _run_synth(cfg: dict, base: Path, out: Path, seed: int, data: PipelineData,
               workers: int = 1) -> None:
    tr = cfg.get("trajectory", {})
    traj, imu = generate_trajectory(
        tr.get("kind", "square-loop"), float(tr.get("length_m", 300.0)),
        float(tr.get("speed_mps", 5.0)), float(tr.get("dt_s", 0.2)),
        turn_duration=tr.get("turn_duration_s"))
    scene = _build_scene(cfg, base, traj, seed)
    grid = _grid_from(cfg.get("grid", {}))
    lidar_cfg = cfg.get("lidar", {})
    lidar = LidarSpec(
        n_azimuth=int(lidar_cfg.get("n_azimuth", 360)),
        max_range=float(lidar_cfg.get("max_range_m", 60.0)),
        points_per_column=int(lidar_cfg.get("points_per_column", 6)),
        range_noise=float(lidar_cfg.get("range_noise_m", 0.02)),
        ground_points=int(lidar_cfg.get("ground_points", 0)))
    corr_cfg = cfg.get("corruption", {})
    corruption = CorruptionSpec(
        float(corr_cfg.get("building_to_vegetation_rate", 0.0)),
        float(corr_cfg.get("vegetation_to_building_rate", 0.0)))
    noise_cfg = cfg.get("radar_noise", {})
    noise = RadarNoiseSpec(**{k: (tuple(v) if isinstance(v, list) else v)
                              for k, v in noise_cfg.items()})

    (out / "scene.json").write_text(json.dumps(scene.to_json(), sort_keys=True) + "\n")
    fileio.write_trajectory(out / "gt.csv", traj)
    fileio.write_imu_csv(out / "imu.csv", imu.timestamps, imu.yaw_rates)
    origin = cfg.get("osm_origin", [48.0, 11.0])
    (out / "map.osm").write_text(scene_to_osm_xml(scene, origin[0], origin[1]))

    def render(i: int) -> None:
        t = float(traj.timestamps[i])
        pose = traj.pose(i)
        cloud, gt_labels = simulate_lidar(scene, pose, lidar, corruption,
                                          frame=i, time=t)
        fileio.write_cloud(out / frame_name(i, ".lpc"), cloud)
        fileio.write_cloud(out / frame_name(i, ".gt.lpc"),
                           cloud.with_labels(gt_labels))
        scan = simulate_radar(scene, pose, grid, noise, frame=i, time=t, timestamp=t)
        fileio.write_polar_scan(out / frame_name(i, ".psc"), scan)
        raster = ground_truth_raster(scene, pose, grid, time=t, timestamp=t)
        fileio.write_class_raster(out / frame_name(i, ".crs"), raster)

    map_frames(render, len(traj), workers)
    data.grid, data.scene, data.gt, data.imu = grid, scene, traj, imu
    data.frames = len(traj)


def _run_preprocess(cfg: dict, synth_dir: Path, out: Path, frames: int,
                    workers: int = 1) -> None:
    ext_cfg = cfg.get("extrinsic", {})
    if "rotation" in ext_cfg:
        extrinsic = Extrinsic(np.array(ext_cfg["rotation"]),
                              np.array(ext_cfg.get("translation_m", [0, 0, 0])))
    else:
        extrinsic = Extrinsic.from_yaw_translation(
            math.radians(float(ext_cfg.get("yaw_deg", 0.0))),
            np.array(ext_cfg.get("translation_m", [0, 0, 0])))
    if "fov_deg" not in cfg:
        raise ConfigError("preprocess.fov_deg is required (the radar vertical "
                          "half field of view has no library default)")
    fov = FovSpec(math.radians(float(cfg["fov_deg"])),
                  float(cfg.get("min_range_m", 0.0)),
                  float(cfg.get("max_range_m", math.inf)))
    ground = cfg.get("ground", {})
    ground_on = bool(ground.get("enabled", True))
    cell = float(ground.get("cell_size_m", 1.0))
    margin = float(ground.get("height_margin_m", 0.3))

    def process(i: int) -> None:
        cloud = fileio.read_cloud(synth_dir / frame_name(i, ".lpc"))
        gt = fileio.read_cloud(synth_dir / frame_name(i, ".gt.lpc"))
        cloud = align_to_radar(cloud, extrinsic)
        gt = align_to_radar(gt, extrinsic)
        keep = np.ones(len(cloud), dtype=bool)
        if ground_on and len(cloud):
            keep &= ~ground_mask(cloud.xyz, cell, margin)
        if len(cloud):
            keep &= fov_retained_mask(cloud.xyz.astype(np.float64), fov)
        fileio.write_cloud(out / frame_name(i, ".lpc"), cloud.select(keep))
        fileio.write_cloud(out / frame_name(i, ".gt.lpc"), gt.select(keep))

    map_frames(process, frames, workers)


def _run_refine(cfg: dict, pre_dir: Path, out: Path, frames: int,
                workers: int = 1) -> dict:
    params = RefineParams(**{k: v for k, v in cfg.items()
                             if k in RefineParams.__dataclass_fields__})

    def process(i: int) -> dict:
        cloud = fileio.read_cloud(pre_dir / frame_name(i, ".lpc"))
        report = RefineReport()
        refined = refine_labels(cloud, params, report)
        fileio.write_cloud(out / frame_name(i, ".lpc"), refined)
        row = {"relabeled_to_vegetation": report.enclosed_to_vegetation,
               "relabeled_to_building": report.vegetation_to_building,
               "points": 0, "correct_before": 0, "correct_after": 0}
        gt_path = pre_dir / frame_name(i, ".gt.lpc")
        if gt_path.exists():
            gt = fileio.read_cloud(gt_path)
            row["points"] = len(cloud)
            row["correct_before"] = int(np.sum(cloud.labels == gt.labels))
            row["correct_after"] = int(np.sum(refined.labels == gt.labels))
        return row

    rows = map_frames(process, frames, workers)
    total = {k: sum(r[k] for r in rows) for k in
             ("relabeled_to_vegetation", "relabeled_to_building", "points",
              "correct_before", "correct_after")}
    if total["points"]:
        total["label_accuracy_before"] = total["correct_before"] / total["points"]
        total["label_accuracy_after"] = total["correct_after"] / total["points"]
    (out / "report.json").write_text(json.dumps(total, sort_keys=True) + "\n")
    return total


def _run_project(cfg: dict, refine_dir: Path, synth_dir: Path, out: Path,
                 frames: int, grid: GridSpec, gt: Trajectory,
                 workers: int = 1) -> None:
    before = int(cfg.get("window_before", 0))
    after = int(cfg.get("window_after", 0))
    rasters = map_frames(
        lambda i: project_all(fileio.read_cloud(refine_dir / frame_name(i, ".lpc")),
                              grid, timestamp=float(gt.timestamps[i])),
        frames, workers)

    def accumulate(i: int) -> None:
        neighbors, poses = [], []
        for j in range(max(0, i - before), min(frames, i + after + 1)):
            if j == i:
                continue
            neighbors.append(rasters[j])
            poses.append(se2_delta(gt.pose(i), gt.pose(j)))
        accumulated = accumulate_window(
            rasters[i], neighbors, WindowSpec(len(poses), 0, tuple(poses)),
            grid) if neighbors else rasters[i]
        fileio.write_class_raster(out / frame_name(i, ".crs"), accumulated)

    map_frames(accumulate, frames, workers)


def _odom_config(cfg: dict) -> OdomConfig:
    mode = MASK_MODES.get(str(cfg.get("mode", "none")).lower())
    if mode is None:
        raise ConfigError(f"unknown mask mode {cfg.get('mode')!r}; "
                          f"valid: {sorted(set(MASK_MODES))}")
    return OdomConfig(
        k_strongest=int(cfg.get("k_strongest", 12)),
        min_power=float(cfg.get("min_power", 0.0)),
        mask_mode=mode,
        mask_dilation=int(cfg.get("mask_dilation", 1)),
        cell_size=float(cfg.get("cell_size_m", 3.0)),
        min_cell_points=int(cfg.get("min_cell_points", 4)),
        match_radius=float(cfg.get("match_radius_m", 2.0)),
        huber_delta=float(cfg.get("huber_delta_m", 0.1)),
        keyframe_distance=float(cfg.get("keyframe_distance_m", 1.5)),
        keyframe_angle=math.radians(float(cfg.get("keyframe_angle_deg", 5.0))),
        max_keyframes=int(cfg.get("keyframes", 10)),
        imu_penalty_weight=float(cfg.get("imu_penalty_weight", 0.0)))


def run_odometry_sequence(scans: list, rasters: list | None, config: OdomConfig,
                          imu: ImuStream | None) -> tuple[Trajectory, dict]:
    od = RadarOdometry(config, imu=imu)
    times, poses, residuals = [], [], []
    for i, scan in enumerate(scans):
        raster = rasters[i] if rasters is not None else None
        result = od.step(scan, raster)
        times.append(scan.timestamp)
        poses.append(result.pose)
        residuals.append(result.residual)
    finite = [r for r in residuals[1:] if math.isfinite(r)]
    report = {
        "frames": len(scans),
        "diverged_frames": od.diverged_frames,
        "mean_residual_m": float(np.mean(finite)) if finite else None,
    }
    return Trajectory.from_poses(np.array(times), poses), report


def _load_scan_sequence(scan_dir: Path, frames: int):
    return [fileio.read_polar_scan(scan_dir / frame_name(i, ".psc"))
            for i in range(frames)]


def _load_raster_sequence(raster_dir: Path, frames: int):
    return [fileio.read_class_raster(raster_dir / frame_name(i, ".crs"))
            for i in range(frames)]


def _run_odom(cfg: dict, synth_dir: Path, out: Path, frames: int) -> dict:
    config = _odom_config(cfg)
    scans = _load_scan_sequence(synth_dir, frames)
    rasters = _load_raster_sequence(synth_dir, frames) \
        if config.mask_mode != MaskMode.NONE_REMOVED else None
    imu = None
    if bool(cfg.get("imu", False)):
        ts, wz = fileio.read_imu_csv(synth_dir / "imu.csv")
        imu = ImuStream(ts, wz)
    traj, report = run_odometry_sequence(scans, rasters, config, imu)
    fileio.write_trajectory(out / "traj.csv", traj)
    (out / "report.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    return report


def _run_locate(cfg: dict, synth_dir: Path, odom_dir: Path, out: Path,
                frames: int) -> dict:
    origin = cfg.get("osm_origin", [48.0, 11.0])
    wall_map = WallMap(parse_osm(synth_dir / "map.osm", origin[0], origin[1]))
    scans = _load_scan_sequence(synth_dir, frames)
    rasters = _load_raster_sequence(synth_dir, frames)
    odom_file = cfg.get("odometry_file")
    odometry = fileio.read_trajectory(odom_file if odom_file
                                      else odom_dir / "traj.csv")
    gt = fileio.read_trajectory(synth_dir / "gt.csv")
    loc_cfg = LocalizationConfig(
        k_strongest=int(cfg.get("k_strongest", 12)),
        min_power=float(cfg.get("min_power", 0.0)),
        mask_dilation=int(cfg.get("mask_dilation", 1)),
        initial_pose=gt.pose(0) if bool(cfg.get("start_at_ground_truth", True))
        else None)
    est, report = localize_sequence(scans, rasters, odometry, wall_map,
                                    loc_cfg, ground_truth=gt)
    fileio.write_trajectory(out / "est.csv", est)
    (out / "report.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    return report


def _run_eval(cfg: dict, dirs: dict, out: Path, frames: int, grid: GridSpec) -> dict:
    report: dict = {}
    gt = fileio.read_trajectory(dirs["synth"] / "gt.csv")
    lengths = cfg.get("drift_lengths_m", list(metrics.DESK_LENGTHS))
    odom_traj_path = dirs["odom"] / "traj.csv"
    if odom_traj_path.exists():
        est = fileio.read_trajectory(odom_traj_path)
        drift = metrics.kitti_drift(est, gt, lengths)
        report["odometry"] = {
            "translation_error_pct": drift.translation_error,
            "rotation_error_deg_per_100m": drift.rotation_error,
            "per_length": {str(k): v for k, v in drift.per_length.items()},
        }
        metrics.plot_trajectories(out / "trajectories.svg",
                                  {"ground truth": gt, "odometry": est})
        metrics.plot_drift_bars(out / "drift.svg", drift)
    locate_path = dirs["locate"] / "est.csv"
    if locate_path.exists():
        loc = fileio.read_trajectory(locate_path)
        report["localization_ape_m"] = metrics.ape(loc, gt)
    if (dirs["project"] / frame_name(0, ".crs")).exists():
        scores = {"building": [], "vehicle": [], "vegetation": []}
        for i in range(frames):
            pred = fileio.read_class_raster(dirs["project"] / frame_name(i, ".crs"))
            truth = fileio.read_class_raster(dirs["synth"] / frame_name(i, ".crs"))
            for ci, name in enumerate(fileio.RASTER_CHANNEL_NAMES):
                scores[name].append(metrics.iou(pred.channels[ci], truth.channels[ci]))
        report["projection_iou"] = {k: float(np.mean(v)) for k, v in scores.items()}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    return report


def _hash_tree(root: Path) -> dict:
    files = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            files[str(path.relative_to(root))] = digest
    return files


def run_pipeline(config: dict, base: Path | str = ".") -> dict:
    """Execute the configured stages in dependency order; returns the manifest
    (also persisted at out_dir/manifest.json, including on stage failure)."""
    base = Path(base)
    config = validate_config(config, base)
    out_root = base / config["out_dir"]
    out_root.mkdir(parents=True, exist_ok=True)
    seed = int(config.get("seed", 0))
    stages = config["stages"]
    dirs = {name: out_root / name for name in ALL_STAGES}
    data = PipelineData()

    manifest: dict = {"config": config, "stages_run": [], "status": "ok"}

    def finish(status: str, failure: dict | None = None) -> dict:
        manifest["status"] = status
        if failure:
            manifest["failure"] = failure
        manifest["files"] = _hash_tree(out_root)
        (out_root / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        return manifest

    workers = int(config.get("workers", 1))
    current = "resume"
    try:
        if "synth" in stages:
            current = "synth"
            dirs["synth"].mkdir(exist_ok=True)
            _run_synth(config.get("synth", {}), base, dirs["synth"], seed, data,
                       workers)
            manifest["stages_run"].append("synth")
        if data.frames == 0 and any(s in stages for s in ALL_STAGES[1:]):
            # stages after synth need the frame count from a previous run
            existing = sorted(dirs["synth"].glob("frame_*.psc"))
            if not existing:
                raise StageError(current, "no synth outputs available")
            data.frames = len(existing)
            data.grid = GridSpec.of(fileio.read_polar_scan(existing[0]))
            data.gt = fileio.read_trajectory(dirs["synth"] / "gt.csv")
        if "preprocess" in stages:
            current = "preprocess"
            dirs["preprocess"].mkdir(exist_ok=True)
            _run_preprocess(config.get("preprocess", {}), dirs["synth"],
                            dirs["preprocess"], data.frames, workers)
            manifest["stages_run"].append("preprocess")
        if "refine" in stages:
            current = "refine"
            dirs["refine"].mkdir(exist_ok=True)
            _run_refine(config.get("refine", {}), dirs["preprocess"],
                        dirs["refine"], data.frames, workers)
            manifest["stages_run"].append("refine")
        if "project" in stages:
            current = "project"
            dirs["project"].mkdir(exist_ok=True)
            _run_project(config.get("project", {}), dirs["refine"], dirs["synth"],
                         dirs["project"], data.frames, data.grid, data.gt, workers)
            manifest["stages_run"].append("project")
        if "odom" in stages:
            current = "odom"
            dirs["odom"].mkdir(exist_ok=True)
            _run_odom(config.get("odom", {}), dirs["synth"], dirs["odom"],
                      data.frames)
            manifest["stages_run"].append("odom")
        if "locate" in stages:
            current = "locate"
            dirs["locate"].mkdir(exist_ok=True)
            _run_locate(config.get("locate", {}), dirs["synth"], dirs["odom"],
                        dirs["locate"], data.frames)
            manifest["stages_run"].append("locate")
        if "eval" in stages:
            current = "eval"
            dirs["eval"].mkdir(exist_ok=True)
            _run_eval(config.get("eval", {}), dirs, dirs["eval"],
                      data.frames, data.grid)
            manifest["stages_run"].append("eval")
    except (ConfigError,):
        raise
    except StageError as err:
        finish("failed", {"stage": err.stage, "frame": err.frame, "error": str(err)})
        raise
    except Exception as err:  # halt, persist partial manifest, then surface
        finish("failed", {"stage": current, "frame": None, "error": str(err)})
        raise StageError(current, str(err)) from err
    return finish("ok")


def ablation(config: dict, modes: list, imu_flags: list,
             base: Path | str = ".") -> dict:
    """Odometry drift per (mask mode x imu) cell on one synth sequence.

    Reuses the synth stage outputs (running synth first if needed) and marks
    the winning cell per the lowest translation error.
    """
    base = Path(base)
    config = validate_config(config, base)
    if not modes:
        raise ConfigError("ablation needs at least one mask mode")
    if not imu_flags:
        raise ConfigError("ablation needs at least one imu setting")
    bad = [m for m in modes if str(m).lower() not in MASK_MODES]
    if bad:
        raise ConfigError(f"unknown mask modes {bad}")

    out_root = base / config["out_dir"]
    synth_dir = out_root / "synth"
    if not (synth_dir / "gt.csv").exists():
        synth_config = dict(config)
        synth_config["stages"] = ["synth"]
        run_pipeline(synth_config, base)
    frames = len(sorted(synth_dir.glob("frame_*.psc")))
    scans = _load_scan_sequence(synth_dir, frames)
    rasters = _load_raster_sequence(synth_dir, frames)
    gt = fileio.read_trajectory(synth_dir / "gt.csv")
    ts, wz = fileio.read_imu_csv(synth_dir / "imu.csv")
    imu = ImuStream(ts, wz)
    lengths = config.get("eval", {}).get("drift_lengths_m", list(metrics.DESK_LENGTHS))

    cells = []
    for mode_name in modes:
        mode = MASK_MODES[str(mode_name).lower()]
        for use_imu in imu_flags:
            odom_cfg = _odom_config({**config.get("odom", {}), "mode": mode_name})
            est, _ = run_odometry_sequence(
                scans, rasters if mode != MaskMode.NONE_REMOVED else None,
                odom_cfg, imu if use_imu else None)
            drift = metrics.kitti_drift(est, gt, lengths)
            cells.append({
                "mode": mode.value, "imu": bool(use_imu),
                "translation_error_pct": drift.translation_error,
                "rotation_error_deg_per_100m": drift.rotation_error,
            })
    best = min(range(len(cells)), key=lambda i: cells[i]["translation_error_pct"])
    for i, cell in enumerate(cells):
        cell["best"] = i == best
    table = {"cells": cells, "frames": frames}
    out_dir = out_root / "ablation"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "table.json").write_text(json.dumps(table, sort_keys=True, indent=1) + "\n")
    return table


def format_ablation_table(table: dict) -> str:
    lines = [f"{'mode':<18}{'imu':<6}{'trans [%]':<12}{'rot [deg/100m]':<16}"]
    for cell in table["cells"]:
        mark = "  <- best" if cell["best"] else ""
        lines.append(f"{cell['mode']:<18}{str(cell['imu']).lower():<6}"
                     f"{cell['translation_error_pct']:<12.3f}"
                     f"{cell['rotation_error_deg_per_100m']:<16.3f}{mark}")
    return "\n".join(lines)
