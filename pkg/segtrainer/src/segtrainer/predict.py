"""Inference: polar scan in, ClassRaster file out, bit-compatible with the
consuming pipeline. Sigmoid maps threshold at a strict > 0.5."""

from __future__ import annotations

import numpy as np
import torch

from .formats import FormatError, Grid, read_polar_scan, write_class_raster
from .model import PolarUNet, normalize_power
from .train import load_checkpoint


def predict_channels(model: PolarUNet, power: np.ndarray) -> np.ndarray:
    """(3, A, R) boolean occupancy from one power image."""
    model.eval()
    with torch.no_grad():
        x = normalize_power(power).unsqueeze(0).unsqueeze(0)
        probabilities = torch.sigmoid(model(x))[0]
    return (probabilities > 0.5).numpy()


def predict_file(checkpoint_path, scan_path, out_path, device: str = "cpu") -> Grid:
    model, train_grid, _ = load_checkpoint(checkpoint_path, device)
    power, grid, timestamp = read_polar_scan(scan_path)
    if grid != train_grid:
        raise FormatError(f"{scan_path}: grid {grid} does not match the "
                          f"checkpoint's training grid {train_grid}")
    channels = predict_channels(model, power)
    write_class_raster(out_path, channels, grid, timestamp)
    return grid
