"""Radar semantic segmentation trainer: U-Net over polar power images with
focal+dice supervision from class rasters, file-format compatible with the
data-producing pipeline."""

from .formats import Grid, read_class_raster, read_polar_scan, write_class_raster
from .losses import combined_loss, dice_loss, focal_loss
from .model import PolarUNet, normalize_power
from .predict import predict_channels, predict_file
from .train import TrainConfig, load_checkpoint, load_dataset, train

__version__ = "0.1.0"
