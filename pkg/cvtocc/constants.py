#!/bin/env python
"""
This module contains configuration settings shared across the package.
"""

from pathlib import Path
from xdg_base_dirs import xdg_config_home
from typing import Any, Dict

# Define paths for the user-level configuration file
BASE = Path(xdg_config_home(), "cvtocc")
CONFIG_FILE = BASE / "config.yaml"

VERSION = "0.1.0"

# Exit codes of the command line
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3

DATASET_MAGIC = b"CVTDATA\0"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"CVTCKPT\0"
CHECKPOINT_VERSION = 1

SPLIT_TRAIN = "train"
SPLIT_EVAL = "eval"

SWEEP_AXES = ["frame_count", "frame_interval", "cvt_supervision", "baseline_mode", "none"]

# Desk-scale defaults. Keys mirror SceneConfig and TrainConfig fields.
DEFAULT_CONFIG: Dict[str, Any] = {
    "grid_height": 48,
    "grid_width": 48,
    "grid_depth": 8,
    "voxel_size": 0.5,
    "center_offset": [0.0, 0.0, 0.0],
    "feature_channels": 8,
    "class_names": ["free", "road", "vehicle", "pedestrian", "building"],
    "ground_class": 1,
    "ground_height": -1.0,
    "box_count_min": 1,
    "box_count_max": 4,
    "box_size_min": 1.0,
    "box_size_max": 4.0,
    "ego_speed": 2.0,
    "ego_speed_spread": 0.5,
    "frame_interval": 0.5,
    "frame_count": 7,
    "noise_sigma": 0.05,
    "strides": [-4, -3, -2, -1, 0, 1, 2, 3, 4],
    "interpolation": "trilinear",
    "train_samples": 200,
    "eval_samples": 40,
    "seed": 0,
    "epochs": 20,
    "batch_size": 1,
    "learning_rate": 2.0e-3,
    "weight_decay": 0.01,
    "cvt_lambda": 1.0,
    "cvt_supervision": True,
    "baseline_mode": False,
    "hidden_width": 32,
    "excluded_classes": [],
    "log_train_miou": True,
}
