"""
Everything cvtocc writes to disk.

Containers are little-endian and deterministic: JSON parts are dumped with sorted keys, and
nothing depends on the time of writing, so equal inputs give byte-identical files.

Functions:
    write_default_config(config_file)
    write_dataset(path, dataset, config_hash, strides)
    write_checkpoint(path, checkpoint)
    write_metric_log(path, rows, config_hash)
    write_eval_report(path, report, config_hash)
    write_sweep(path, rows, config_hash)
"""

import csv
import json
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from cvtocc import constants
from cvtocc.metrics_eval import BINARY_NAMES, SPLIT_ALL, SPLIT_BINARY, EvalReport
from cvtocc.pure import format_value
from cvtocc.synthetic_world import FrameSample, SyntheticDataset
from cvtocc.trainer import Checkpoint, MetricRow

SWEEP_COLUMNS = [
    "axis",
    "value",
    "seeds",
    "miou_mean",
    "miou_std",
    "nonfree_iou_mean",
    "nonfree_iou_std",
    "near_miou_mean",
    "far_miou_mean",
    "slow_miou_mean",
    "fast_miou_mean",
    "time_span",
    "diverged",
]
SPLIT_TAGS = {constants.SPLIT_TRAIN: 0, constants.SPLIT_EVAL: 1}
DTYPE_TAGS = {b"f4": "<f4", b"f8": "<f8"}


def canonical_json(data: Any) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _prepare(path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)


def write_default_config(config_file: str) -> None:
    """Create a config file holding the default settings, with its parent directories."""
    _prepare(config_file)
    with open(config_file, "w", encoding="utf-8") as file:
        yaml.dump(constants.DEFAULT_CONFIG, file, default_flow_style=False)


def dataset_header(
    dataset: SyntheticDataset, config_hash: str, strides: Sequence[float]
) -> dict[str, Any]:
    grid = dataset.grid
    samples = dataset.train + dataset.eval
    channels = samples[0].window.current.channels if samples else 0
    return {
        "grid": {
            "height_cells": grid.height_cells,
            "width_cells": grid.width_cells,
            "depth_cells": grid.depth_cells,
            "voxel_size": grid.voxel_size,
            "center_offset": list(grid.center_offset),
        },
        "frame_count": dataset.frame_count,
        "channels": channels,
        "class_names": list(dataset.class_set.names),
        "frame_interval": dataset.frame_interval,
        "strides": list(strides),
        "config_hash": config_hash,
        "sample_count": len(samples),
    }


def encode_sample(sample: FrameSample, split: str) -> bytes:
    """Payload of one dataset record."""
    frames = sample.window.frames
    parts = [struct.pack("<Bd", SPLIT_TAGS[split], sample.ego_speed)]
    for frame in frames:
        pose = frame.frame_pose
        parts.append(struct.pack("<d", pose.timestamp))
        parts.append(np.ascontiguousarray(pose.transform, dtype="<f8").tobytes())
    for frame in frames:
        parts.append(np.ascontiguousarray(frame.features, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(sample.gt.labels, dtype=np.uint8).tobytes())
    parts.append(np.ascontiguousarray(sample.mask.mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def write_dataset(
    path: str, dataset: SyntheticDataset, config_hash: str, strides: Sequence[float]
) -> int:
    """
    Write a dataset container.

    Args:
        path (str): output file; parent directories are created.
        dataset (SyntheticDataset): train samples are written first, then eval samples.
        config_hash (str): hash of the config the dataset was generated from.
        strides (Sequence[float]): stride set recorded in the header.

    Side effects:
        - Creates or overwrites `path`.

    Returns:
        int: number of bytes written.
    """
    header = canonical_json(dataset_header(dataset, config_hash, strides))
    records = [(s, constants.SPLIT_TRAIN) for s in dataset.train] + [
        (s, constants.SPLIT_EVAL) for s in dataset.eval
    ]
    parts = [
        constants.DATASET_MAGIC,
        struct.pack("<II", constants.DATASET_VERSION, len(header)),
        header,
        struct.pack("<I", len(records)),
    ]
    for sample, split in records:
        payload = encode_sample(sample, split)
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
        parts.append(struct.pack("<I", zlib.crc32(payload)))
    blob = b"".join(parts)
    _prepare(path)
    Path(path).write_bytes(blob)
    return len(blob)


def checkpoint_tensors(checkpoint: Checkpoint) -> dict[str, np.ndarray]:
    tensors = dict(checkpoint.params)
    for name, moment in checkpoint.adam.m.items():
        tensors[f"adam.m/{name}"] = moment
    for name, moment in checkpoint.adam.v.items():
        tensors[f"adam.v/{name}"] = moment
    return tensors


def write_checkpoint(path: str, checkpoint: Checkpoint) -> int:
    """
    Write a checkpoint container: metadata JSON, then every named tensor, then a CRC-32 of
    everything before it.

    Returns:
        int: number of bytes written.
    """
    metadata = canonical_json(
        {
            "config": checkpoint.config,
            "config_hash": checkpoint.config_hash,
            "epoch": checkpoint.epoch,
            "seed": checkpoint.seed,
            "rng_state": checkpoint.rng_state,
            "optimizer_step": checkpoint.adam.step,
        }
    )
    tensors = checkpoint_tensors(checkpoint)
    parts = [
        constants.CHECKPOINT_MAGIC,
        struct.pack("<II", constants.CHECKPOINT_VERSION, len(metadata)),
        metadata,
        struct.pack("<I", len(tensors)),
    ]
    for name in sorted(tensors):
        values = tensors[name]
        tag = f"{values.dtype.kind}{values.dtype.itemsize}".encode("ascii")
        assert tag in DTYPE_TAGS, f"unsupported tensor dtype {values.dtype}"
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(tag)
        parts.append(struct.pack("<B", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(np.ascontiguousarray(values, dtype=DTYPE_TAGS[tag]).tobytes())
    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body))
    _prepare(path)
    Path(path).write_bytes(blob)
    return len(blob)


def _write_csv(
    path: str, config_hash: str, header: list[str], rows: list[list[str]]
) -> None:
    _prepare(path)
    with open(path, "w", encoding="utf-8", newline="") as file:
        file.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_metric_log(path: str, rows: Sequence[MetricRow], config_hash: str) -> None:
    _write_csv(
        path,
        config_hash,
        ["epoch", "split", "metric", "value"],
        [[str(r.epoch), r.split, r.metric, format_value(r.value)] for r in rows],
    )


def eval_report_rows(report: EvalReport) -> list[list[str]]:
    """One row per class and split, then an mIoU row per split."""
    rows: list[list[str]] = []
    for split, tally in report.tallies.items():
        names = BINARY_NAMES if split == SPLIT_BINARY else report.class_names
        for name, iou, inter, union in zip(
            names, tally.ious(), tally.intersection, tally.union
        ):
            rows.append([split, name, format_value(iou), str(inter), str(union)])
    for split in report.tallies:
        if split == SPLIT_BINARY:
            continue
        value = report.miou if split == SPLIT_ALL else report.split_miou(split)
        rows.append([split, "mIoU", format_value(value), "", ""])
    return rows


def write_eval_report(path: str, report: EvalReport, config_hash: str) -> str:
    """
    Write the report CSV and, next to it, a JSON summary record.

    Returns:
        str: path of the JSON summary.
    """
    _write_csv(
        path,
        config_hash,
        ["split", "class", "iou", "intersection", "union"],
        eval_report_rows(report),
    )
    summary_path = os.path.splitext(path)[0] + ".json"
    summary = dict(report.summary(), config_hash=config_hash)
    with open(summary_path, "w", encoding="utf-8") as file:
        json.dump(summary, file, sort_keys=True, indent=2)
        file.write("\n")
    return summary_path


def write_sweep(
    path: str, rows: Sequence[dict[str, Any]], config_hash: str
) -> None:
    """Write aggregated sweep rows, one per sweep value, in SWEEP_COLUMNS order."""

    def cell(value: Optional[Any]) -> str:
        if value is None or isinstance(value, float):
            return format_value(value)
        if isinstance(value, bool):
            return str(value).lower()
        return str(value)

    _write_csv(
        path, config_hash, SWEEP_COLUMNS, [[cell(row[c]) for c in SWEEP_COLUMNS] for row in rows]
    )
