"""
Small side-effect-free helpers shared by the command line and the writers: hashing configs,
formatting numbers, applying sweep values and aggregating over seeds.
"""

import hashlib
import json
from typing import Any, Optional, Sequence

import numpy as np
import yaml
from toolz import merge  # type: ignore

from cvtocc.errors import ConfigError


def config_hash(config: dict[str, Any]) -> str:
    """
    SHA-256 of the canonical JSON dump of a resolved config.

    Args:
        config (dict[str, Any]): a flat config mapping.

    Preconditions:
        - config holds only JSON-serialisable values.

    Side effects:
        None

    Exceptions:
        None

    Returns:
        str: 64 hex digits; equal configs hash equally regardless of key order.
    """
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def format_value(value: Optional[float]) -> str:
    """Six significant digits; absent values are written as nan."""
    if value is None:
        return "nan"
    return "%.6g" % value


def format_size(num_bytes: int) -> str:
    """Size in kilobytes with 2 decimals, e.g. '12.34 KB'."""
    return f"{num_bytes / 1024:.2f} KB"


def time_span(frame_count: int, frame_interval: float) -> float:
    """Time between the oldest frame of a window and the current one."""
    assert frame_count >= 1, "a window has at least one frame"
    return (frame_count - 1) * frame_interval


def apply_sweep_value(config: dict[str, Any], axis: str, value: Any) -> dict[str, Any]:
    """
    The config of one sweep run: `config` with `axis` set to `value`.

    Exceptions:
        ConfigError: if the axis is not a config key (the "none" axis leaves config unchanged).
    """
    if axis == "none":
        return dict(config)
    if axis not in config:
        raise ConfigError(f"Sweep axis {axis!r} is not a config key")
    return merge(config, {axis: value})


def parse_sweep_option(option: str) -> tuple[str, list[Any]]:
    """
    Parse 'axis=v1,v2,...' into the axis and its typed values.

    Values parse as YAML scalars, so 'true' is a bool, '3' an int and '0.5' a float.

    Exceptions:
        ConfigError: if the option has no '=' or no values.
    """
    axis, sep, raw = option.partition("=")
    if not sep or not axis.strip() or not raw.strip():
        raise ConfigError(f"Expected --sweep axis=v1,v2,..., got {option!r}")
    return axis.strip(), [yaml.safe_load(v.strip()) for v in raw.split(",")]


def mean_std(values: Sequence[float]) -> tuple[Optional[float], Optional[float]]:
    """Mean and population standard deviation; (None, None) for an empty sequence."""
    if not values:
        return None, None
    array = np.asarray(values, dtype=np.float64)
    return float(array.mean()), float(array.std())
