"""Desk-scale training, feature-reuse analysis and sweeps."""

from densekit.train.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from densekit.train.config import TrainConfig
from densekit.train.data import Dataset, blobs, load_dataset, normalize, pad_crop_mirror, save_dataset, shapes
from densekit.train.heatmap import HeatmapReport, feature_reuse_heatmap
from densekit.train.init import he_std, init_weights
from densekit.train.loop import EpochMetrics, TrainResult, build_for_training, train
from densekit.train.optim import lr_at, sgd_nesterov_step
from densekit.train.sweep import SweepSpec, run_sweep, sweep_csv

__all__ = [
    "Dataset", "EpochMetrics", "HeatmapReport", "SweepSpec", "TrainConfig", "TrainResult", "blobs",
    "build_for_training", "feature_reuse_heatmap", "he_std", "init_weights", "load_checkpoint", "load_dataset",
    "lr_at", "normalize", "pad_crop_mirror", "read_checkpoint", "run_sweep", "save_checkpoint", "save_dataset",
    "sgd_nesterov_step", "shapes", "sweep_csv", "train",
]
