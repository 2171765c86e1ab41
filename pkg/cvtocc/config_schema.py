"""
JSON schemas for everything cvtocc reads from disk: the flat run config, experiment
manifests, and the JSON headers of dataset and checkpoint containers.
"""

from typing import Any, Optional

from jsonschema import ValidationError, validate  # type: ignore

from cvtocc.errors import ConfigError, ContainerError

_positive_int = {"type": "integer", "minimum": 1}
_nonnegative_number = {"type": "number", "minimum": 0}
_positive_number = {"type": "number", "exclusiveMinimum": 0}
_vector3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "grid_height": _positive_int,
        "grid_width": _positive_int,
        "grid_depth": _positive_int,
        "voxel_size": _positive_number,
        "center_offset": _vector3,
        "feature_channels": _positive_int,
        "class_names": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "ground_class": _positive_int,
        "ground_height": {"type": "number"},
        "box_count_min": {"type": "integer", "minimum": 0},
        "box_count_max": {"type": "integer", "minimum": 0},
        "box_size_min": _positive_number,
        "box_size_max": _positive_number,
        "ego_speed": _nonnegative_number,
        "ego_speed_spread": {"type": "number", "minimum": 0, "maximum": 1},
        "frame_interval": _positive_number,
        "frame_count": _positive_int,
        "noise_sigma": _nonnegative_number,
        "strides": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "interpolation": {"enum": ["trilinear", "bilinear"]},
        "train_samples": _positive_int,
        "eval_samples": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "epochs": _positive_int,
        "batch_size": {"const": 1},
        "learning_rate": _nonnegative_number,
        "weight_decay": _nonnegative_number,
        "cvt_lambda": _nonnegative_number,
        "cvt_supervision": {"type": "boolean"},
        "baseline_mode": {"type": "boolean"},
        "hidden_width": _positive_int,
        "excluded_classes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "log_train_miou": {"type": "boolean"},
    },
    "additionalProperties": False,
}

MANIFEST_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "config": {"type": "string"},
        "seeds": {
            "type": "array",
            "items": {"type": "integer", "minimum": 0},
            "minItems": 1,
        },
        "sweep": {
            "type": "object",
            "properties": {
                "axis": {
                    "enum": [
                        "frame_count",
                        "frame_interval",
                        "cvt_supervision",
                        "baseline_mode",
                        "none",
                    ]
                },
                "values": {"type": "array"},
            },
            "required": ["axis"],
            "additionalProperties": False,
        },
        "output_dir": {"type": "string"},
    },
    "required": ["seeds", "sweep"],
    "additionalProperties": False,
}

# Values each sweep axis accepts.
SWEEP_VALUE_SCHEMAS: dict[str, dict[str, Any]] = {
    "frame_count": _positive_int,
    "frame_interval": _positive_number,
    "cvt_supervision": {"type": "boolean"},
    "baseline_mode": {"type": "boolean"},
}

DATASET_HEADER_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "grid": {
            "type": "object",
            "properties": {
                "height_cells": _positive_int,
                "width_cells": _positive_int,
                "depth_cells": _positive_int,
                "voxel_size": _positive_number,
                "center_offset": _vector3,
            },
            "required": [
                "height_cells",
                "width_cells",
                "depth_cells",
                "voxel_size",
                "center_offset",
            ],
        },
        "frame_count": _positive_int,
        "channels": _positive_int,
        "class_names": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "frame_interval": _positive_number,
        "strides": {"type": "array", "items": {"type": "number"}},
        "config_hash": {"type": "string"},
        "sample_count": {"type": "integer", "minimum": 0},
    },
    "required": [
        "grid",
        "frame_count",
        "channels",
        "class_names",
        "frame_interval",
        "config_hash",
        "sample_count",
    ],
}

CHECKPOINT_METADATA_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "config": {"type": "object"},
        "config_hash": {"type": "string"},
        "epoch": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "rng_state": {"type": "object"},
        "optimizer_step": {"type": "integer", "minimum": 0},
    },
    "required": ["config", "config_hash", "epoch", "seed", "rng_state", "optimizer_step"],
}


def _error_key(error: ValidationError) -> Optional[str]:
    path = [str(p) for p in error.absolute_path]
    return ".".join(path) if path else None


def validate_config(config: dict[str, Any]) -> None:
    """
    Validate a resolved config.

    Exceptions:
        ConfigError: naming the offending key.
    """
    try:
        validate(config, CONFIG_SCHEMA)
    except ValidationError as e:
        key = _error_key(e)
        raise ConfigError(f"Invalid config value for {key!r}: {e.message}") from e


def validate_manifest(manifest: dict[str, Any]) -> None:
    """
    Validate an experiment manifest, including the values of its sweep axis.

    Exceptions:
        ConfigError: naming the offending entry.
    """
    try:
        validate(manifest, MANIFEST_SCHEMA)
        sweep = manifest["sweep"]
        axis = sweep["axis"]
        if axis != "none":
            values = sweep.get("values", [])
            if not values:
                raise ConfigError(f"Sweep axis {axis!r} needs at least one value")
            for value in values:
                validate(value, SWEEP_VALUE_SCHEMAS[axis])
    except ValidationError as e:
        key = _error_key(e) or "sweep.values"
        raise ConfigError(f"Invalid manifest entry {key!r}: {e.message}") from e


def validate_header(header: dict[str, Any], schema: dict[str, Any]) -> None:
    """
    Validate a container's JSON header.

    Exceptions:
        ContainerError: if the header does not match the schema.
    """
    try:
        validate(header, schema)
    except ValidationError as e:
        raise ContainerError(f"Malformed container header: {e.message}") from e
