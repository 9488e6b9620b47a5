"""Training loop: paired frame_XXXX.psc / frame_XXXX.crs directories in,
checkpoint plus loss curve out. AdamW with the published recipe (lr 1e-4,
weight decay 1e-6, beta1 0.9); the "momentum" figure maps to beta1 since
AdamW has no classical momentum term.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .formats import FormatError, Grid, read_class_raster, read_polar_scan
from .losses import combined_loss
from .model import PolarUNet, normalize_power


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    batch_size: int = 4
    epochs: int = 200
    focal_gamma: float = 2.0
    focal_weight: float = 1.0
    dice_weight: float = 1.0
    base_channels: int = 16
    levels: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs) <= 0:
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if self.focal_weight == 0.0 and self.dice_weight == 0.0:
            raise ValueError("degenerate loss: focal and dice weights are both zero")

    @staticmethod
    def from_json(doc: dict) -> "TrainConfig":
        known = {k: v for k, v in doc.items()
                 if k in TrainConfig.__dataclass_fields__}
        return TrainConfig(**known)


@dataclass
class SegDataset:
    """Paired scans/targets loaded fully into memory (desk-scale sets)."""

    inputs: torch.Tensor   # (N, 1, A, R) normalized power
    targets: torch.Tensor  # (N, 3, A, R) float binary
    grid: Grid
    names: list = field(default_factory=list)


def load_dataset(data_dir) -> SegDataset:
    data_dir = Path(data_dir)
    scan_files = sorted(data_dir.glob("*.psc"))
    if not scan_files:
        raise FormatError(f"no .psc files in {data_dir}")
    inputs, targets, names = [], [], []
    grid = None
    for scan_path in scan_files:
        raster_path = scan_path.with_suffix(".crs")
        if not raster_path.exists():
            raise FormatError(f"{scan_path.name} has no paired {raster_path.name}")
        power, scan_grid, _ = read_polar_scan(scan_path)
        channels, raster_grid, _ = read_class_raster(raster_path)
        if scan_grid != raster_grid:
            raise FormatError(f"{scan_path.name}: scan grid {scan_grid} != "
                              f"raster grid {raster_grid}")
        if grid is None:
            grid = scan_grid
        elif scan_grid != grid:
            raise FormatError(f"{scan_path.name}: grid {scan_grid} differs "
                              f"from the dataset grid {grid}")
        inputs.append(normalize_power(power).unsqueeze(0))
        targets.append(torch.as_tensor(channels, dtype=torch.float32))
        names.append(scan_path.name)
    return SegDataset(torch.stack(inputs), torch.stack(targets), grid, names)


def train(data_dir, config: TrainConfig | None = None, out_dir=None,
          device: str = "cpu") -> dict:
    """Train and (optionally) persist checkpoint + loss curve.

    Returns {"model", "loss_curve", "grid", "config"}; when out_dir is given,
    writes checkpoint.pt and loss_curve.csv there.
    """
    config = config or TrainConfig()
    dataset = load_dataset(data_dir)
    torch.manual_seed(config.seed)
    model = PolarUNet(config.base_channels, config.levels).to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay,
                                  betas=(config.beta1, 0.999))
    n = len(dataset.inputs)
    inputs = dataset.inputs.to(device)
    targets = dataset.targets.to(device)
    generator = torch.Generator().manual_seed(config.seed)

    curve = []
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=generator)
        epoch_total = epoch_focal = epoch_dice = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            logits = model(inputs[idx])
            total, focal, dice = combined_loss(
                logits, targets[idx], config.focal_weight, config.dice_weight,
                config.focal_gamma)
            total.backward()
            optimizer.step()
            epoch_total += total.item()
            epoch_focal += focal.item()
            epoch_dice += dice.item()
            batches += 1
        curve.append({"epoch": epoch, "total": epoch_total / batches,
                      "focal": epoch_focal / batches, "dice": epoch_dice / batches})

    result = {"model": model, "loss_curve": curve, "grid": dataset.grid,
              "config": config}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint.pt", model, dataset.grid, config)
        with open(out_dir / "loss_curve.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "total", "focal", "dice"])
            writer.writeheader()
            writer.writerows(curve)
    return result


def save_checkpoint(path, model: PolarUNet, grid: Grid, config: TrainConfig) -> None:
    torch.save({
        "state_dict": model.state_dict(),
        "grid": asdict(grid),
        "config": asdict(config),
    }, path)


def load_checkpoint(path, device: str = "cpu") -> tuple:
    blob = torch.load(path, map_location=device, weights_only=False)
    config = TrainConfig(**blob["config"])
    model = PolarUNet(config.base_channels, config.levels).to(device)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    grid = Grid(**blob["grid"])
    return model, grid, config
