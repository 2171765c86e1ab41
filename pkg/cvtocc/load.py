"""
Everything cvtocc reads from disk.

This module provides functions to:
1. Load a YAML run config, creating it with default values if it doesn't exist.
2. Load an experiment manifest.
3. Read dataset and checkpoint containers, checking magic, version and checksums.

Functions:
    load_config(config_file)
    load_manifest(manifest_file)
    read_dataset(path)
    read_checkpoint(path)
"""

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Tuple

import numpy as np
import yaml
from toolz import merge  # type: ignore

from cvtocc import constants
from cvtocc.config_schema import (
    CHECKPOINT_METADATA_SCHEMA,
    DATASET_HEADER_SCHEMA,
    validate_config,
    validate_header,
    validate_manifest,
)
from cvtocc.cost_volume import TemporalWindow, VolumeFeatures
from cvtocc.errors import ConfigError, ContainerError, CvtOccError
from cvtocc.grid_geometry import FramePose, GridSpec
from cvtocc.occupancy_head import ClassSet, OccupancyGrid, VisibilityMask
from cvtocc.save import DTYPE_TAGS, write_default_config
from cvtocc.synthetic_world import FrameSample, SyntheticDataset
from cvtocc.trainer import AdamState, Checkpoint


def load_config(config_file: str) -> dict[str, Any]:
    """
    Read a YAML config file and return the resolved config.

    Args:
        config_file (str): Path to the YAML configuration file.

    Side effects:
        - If the config file does not exist, it is created with the default configuration.

    Exceptions:
        ConfigError: if the file is not a YAML mapping, holds an unknown key, or a value fails
        validation. The message names the key.

    Returns:
        dict: every key of constants.DEFAULT_CONFIG, missing ones filled from the defaults.
    """
    if not Path(config_file).exists():
        write_default_config(config_file)

    with open(config_file, encoding="utf-8") as file:
        try:
            loaded = yaml.safe_load(file)
        except yaml.YAMLError as e:
            raise ConfigError(f"{config_file} is not valid YAML: {e}") from e
    if loaded is None:
        loaded = {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{config_file} must hold a mapping of config keys")

    for key in loaded:
        if key not in constants.DEFAULT_CONFIG:
            raise ConfigError(f"Unknown config key {key!r} in {config_file}")

    config = merge(constants.DEFAULT_CONFIG, loaded)
    validate_config(config)
    return config


def load_manifest(manifest_file: str) -> dict[str, Any]:
    """
    Read and validate an experiment manifest. A relative `config` path is resolved against
    the manifest's directory.

    Exceptions:
        ConfigError: if the file is missing or the manifest is invalid.
    """
    if not Path(manifest_file).is_file():
        raise ConfigError(f"Manifest {manifest_file} does not exist")
    with open(manifest_file, encoding="utf-8") as file:
        try:
            manifest = yaml.safe_load(file)
        except yaml.YAMLError as e:
            raise ConfigError(f"{manifest_file} is not valid YAML: {e}") from e
    if not isinstance(manifest, dict):
        raise ConfigError(f"{manifest_file} must hold a mapping")
    validate_manifest(manifest)
    if "config" in manifest and not os.path.isabs(manifest["config"]):
        base = os.path.dirname(os.path.abspath(manifest_file))
        manifest = merge(manifest, {"config": os.path.join(base, manifest["config"])})
    return manifest


class _Cursor:
    """Sequential reader over a byte string; running past the end is a ContainerError."""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if size < 0 or self.offset + size > len(self.data):
            raise ContainerError(f"{self.source} is truncated")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        size = count * np.dtype(dtype).itemsize
        return np.frombuffer(self.take(size), dtype=dtype).reshape(shape).copy()

    def json(self, size: int) -> Any:
        try:
            return json.loads(self.take(size).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ContainerError(f"{self.source} has an unreadable header") from e


def _open_container(path: str, magic: bytes, version: int) -> _Cursor:
    if not Path(path).is_file():
        raise ContainerError(f"{path} does not exist")
    cursor = _Cursor(Path(path).read_bytes(), path)
    if cursor.take(len(magic)) != magic:
        raise ContainerError(f"{path} is not a cvtocc container of the expected kind")
    (found,) = cursor.unpack("<I")
    if found != version:
        raise ContainerError(f"{path} has version {found}, expected {version}")
    return cursor


def _decode_sample(
    cursor: _Cursor, grid: GridSpec, frame_count: int, channels: int, frame_interval: float
) -> Tuple[FrameSample, str]:
    split_tag, speed = cursor.unpack("<Bd")
    if split_tag not in (0, 1):
        raise ContainerError(f"{cursor.source} has an unknown split tag {split_tag}")
    poses = []
    for _ in range(frame_count):
        (timestamp,) = cursor.unpack("<d")
        poses.append(FramePose(cursor.array("<f8", (4, 4)), timestamp))
    frames = [
        VolumeFeatures(cursor.array("<f4", grid.shape + (channels,)), pose, grid)
        for pose in poses
    ]
    labels = cursor.array("u1", grid.shape)
    mask = cursor.array("u1", grid.shape).astype(bool)
    window = TemporalWindow(frames[0], tuple(frames[1:]), frame_interval)
    split = constants.SPLIT_TRAIN if split_tag == 0 else constants.SPLIT_EVAL
    return FrameSample(window, OccupancyGrid(labels), VisibilityMask(mask), speed), split


def read_dataset(path: str) -> Tuple[SyntheticDataset, dict[str, Any]]:
    """
    Read a dataset container.

    Exceptions:
        ContainerError: on a missing file, bad magic, version, header, length or checksum.

    Returns:
        Tuple[SyntheticDataset, dict]: the samples and the container header.
    """
    cursor = _open_container(path, constants.DATASET_MAGIC, constants.DATASET_VERSION)
    (header_size,) = cursor.unpack("<I")
    header = cursor.json(header_size)
    validate_header(header, DATASET_HEADER_SCHEMA)

    try:
        grid = GridSpec(**{**header["grid"], "center_offset": tuple(header["grid"]["center_offset"])})
        dataset = SyntheticDataset(
            grid,
            ClassSet(tuple(header["class_names"])),
            header["frame_interval"],
            header["frame_count"],
        )
    except CvtOccError as e:
        raise ContainerError(f"{path} describes an invalid grid or class set: {e}") from e

    (count,) = cursor.unpack("<I")
    if count != header["sample_count"]:
        raise ContainerError(f"{path} holds {count} records, its header says {header['sample_count']}")
    for index in range(count):
        (size,) = cursor.unpack("<Q")
        payload = cursor.take(size)
        (crc,) = cursor.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise ContainerError(f"{path}: record {index} fails its checksum")
        record = _Cursor(payload, f"{path} record {index}")
        try:
            sample, split = _decode_sample(
                record, grid, header["frame_count"], header["channels"], header["frame_interval"]
            )
        except ContainerError:
            raise
        except CvtOccError as e:
            raise ContainerError(f"{path}: record {index} is invalid: {e}") from e
        if record.offset != len(payload):
            raise ContainerError(f"{path}: record {index} has trailing bytes")
        dataset.split(split).append(sample)
    return dataset, header


def read_checkpoint(path: str) -> Checkpoint:
    """
    Read a checkpoint container.

    Exceptions:
        ContainerError: on a missing file, bad magic, version, metadata or checksum.
    """
    if Path(path).is_file():
        blob = Path(path).read_bytes()
        if len(blob) < 4:
            raise ContainerError(f"{path} is truncated")
        (crc,) = struct.unpack("<I", blob[-4:])
        if zlib.crc32(blob[:-4]) != crc:
            raise ContainerError(f"{path} fails its checksum")
    cursor = _open_container(path, constants.CHECKPOINT_MAGIC, constants.CHECKPOINT_VERSION)
    cursor.data = cursor.data[:-4]
    (metadata_size,) = cursor.unpack("<I")
    metadata = cursor.json(metadata_size)
    validate_header(metadata, CHECKPOINT_METADATA_SCHEMA)

    (count,) = cursor.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_size,) = cursor.unpack("<H")
        name = cursor.take(name_size).decode("utf-8")
        tag = cursor.take(2)
        if tag not in DTYPE_TAGS:
            raise ContainerError(f"{path}: tensor {name} has unknown dtype {tag!r}")
        (rank,) = cursor.unpack("<B")
        shape = cursor.unpack(f"<{rank}I")
        tensors[name] = cursor.array(DTYPE_TAGS[tag], tuple(shape))

    adam = AdamState(step=metadata["optimizer_step"])
    params: dict[str, np.ndarray] = {}
    for name, values in tensors.items():
        if name.startswith("adam.m/"):
            adam.m[name[len("adam.m/") :]] = values
        elif name.startswith("adam.v/"):
            adam.v[name[len("adam.v/") :]] = values
        else:
            params[name] = values
    return Checkpoint(
        params=params,
        adam=adam,
        config=metadata["config"],
        config_hash=metadata["config_hash"],
        epoch=metadata["epoch"],
        seed=metadata["seed"],
        rng_state=metadata["rng_state"],
    )
