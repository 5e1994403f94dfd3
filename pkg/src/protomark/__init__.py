"""Prototype-based anatomical landmark detection with cross-domain alignment."""

__version__ = "0.1.0"

from .core import (ConfigError, Dataset, DatasetError, ProtomarkError, RunConfig, Sample, ShapeError,
                   load_dataset, preset, save_dataset, split_dataset)
from .heatmap import decode_landmarks, render_heatmaps
from .proto import PrototypeBank, ema_update, instance_prototypes, similarity_maps
from .losses import loss_align, loss_mine, loss_reg, loss_total

__all__ = [
    "ConfigError", "Dataset", "DatasetError", "ProtomarkError", "RunConfig", "Sample", "ShapeError",
    "load_dataset", "preset", "save_dataset", "split_dataset", "decode_landmarks", "render_heatmaps",
    "PrototypeBank", "ema_update", "instance_prototypes", "similarity_maps", "loss_align", "loss_mine",
    "loss_reg", "loss_total",
]
