"""
Evaluation of predicted occupancy against ground truth.

IoU is computed per class from a confusion matrix restricted to visible voxels. Tallies are
summed over every sample of a split before dividing (micro-aggregation), and a class whose
union is zero over the whole split is absent: it has no IoU and does not enter mIoU.

Besides the overall report, the same tallies are kept for a binary Free / Non-Free remap, a
near / far partition along x, and a slow / fast partition of the samples by ego speed.

Functions:
    iou_per_class(pred, gt, mask, class_set)
    miou(ious, excluded)
    split_eval(pred, gt, mask, split, class_set, grid, speed, speed_threshold)
    evaluate(preds, gts, masks, speeds, class_set, grid, excluded, speed_threshold)
"""

from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np

from cvtocc.errors import ConfigError, ShapeError
from cvtocc.grid_geometry import GridSpec, voxel_centers_world
from cvtocc.occupancy_head import FREE_CLASS, ClassSet, OccupancyGrid, VisibilityMask

SPLIT_ALL = "all"
SPLIT_BINARY = "binary"
SPLIT_NEAR = "near"
SPLIT_FAR = "far"
SPLIT_SLOW = "slow"
SPLIT_FAST = "fast"
SPLIT_KINDS = ("near_far", "binary", "speed")
BINARY_NAMES = ("free", "non-free")


@dataclass(frozen=True)
class IoUTally:
    """Per-class intersection and union counts; tallies add associatively."""

    intersection: np.ndarray
    union: np.ndarray

    @staticmethod
    def zeros(num_classes: int) -> "IoUTally":
        return IoUTally(
            np.zeros(num_classes, dtype=np.int64), np.zeros(num_classes, dtype=np.int64)
        )

    @staticmethod
    def from_grids(
        pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, num_classes: int
    ) -> "IoUTally":
        """Tally from label arrays of equal shape, counting only voxels where mask is True."""
        if pred.shape != gt.shape or gt.shape != mask.shape:
            raise ShapeError(
                f"pred {pred.shape}, gt {gt.shape} and mask {mask.shape} must match"
            )
        visible = mask.astype(bool)
        p = pred[visible].astype(np.int64)
        g = gt[visible].astype(np.int64)
        if p.size and max(p.max(), g.max()) >= num_classes:
            raise ShapeError(f"Labels must lie in [0, {num_classes - 1}]")
        confusion = np.bincount(
            g * num_classes + p, minlength=num_classes * num_classes
        ).reshape(num_classes, num_classes)
        hits = np.diag(confusion)
        return IoUTally(hits, confusion.sum(axis=0) + confusion.sum(axis=1) - hits)

    def __add__(self, other: "IoUTally") -> "IoUTally":
        assert self.intersection.shape == other.intersection.shape, "class counts differ"
        return IoUTally(
            self.intersection + other.intersection, self.union + other.union
        )

    def ious(self) -> list[Optional[float]]:
        return [
            float(i) / float(u) if u > 0 else None
            for i, u in zip(self.intersection, self.union)
        ]


def iou_per_class(
    pred: OccupancyGrid, gt: OccupancyGrid, mask: VisibilityMask, class_set: ClassSet
) -> list[Optional[float]]:
    """
    IoU of every class, Free included at index 0; None where the union is zero.

    Exceptions:
        ShapeError: if the grids differ in shape.
    """
    return IoUTally.from_grids(
        pred.labels, gt.labels, mask.mask, class_set.num_outputs
    ).ious()


def miou(ious: Sequence[Optional[float]], excluded: Sequence[int] = ()) -> Optional[float]:
    """Unweighted mean over present non-Free classes not in `excluded`; None if there are none."""
    included = [
        iou
        for c, iou in enumerate(ious)
        if c != FREE_CLASS and c not in excluded and iou is not None
    ]
    return float(np.mean(included)) if included else None


def binary_labels(labels: np.ndarray) -> np.ndarray:
    """Remap every semantic class to a single Non-Free class 1."""
    return (labels != FREE_CLASS).astype(np.uint8)


def near_far_masks(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """
    Partition of the grid by distance along x from the ego: near is |x| <= half the grid's
    half-extent, far is the rest.
    """
    x = voxel_centers_world(grid)[..., 0]
    near = np.abs(x) <= grid.half_extent_x / 2
    return near, ~near


def split_eval(
    pred: OccupancyGrid,
    gt: OccupancyGrid,
    mask: VisibilityMask,
    split: str,
    class_set: ClassSet,
    grid: Optional[GridSpec] = None,
    speed: Optional[float] = None,
    speed_threshold: Optional[float] = None,
) -> dict[str, IoUTally]:
    """
    Tallies of one sample under a condition split.

    Args:
        split (str): "near_far" (needs grid), "binary", or "speed" (needs speed and threshold).

    Returns:
        dict[str, IoUTally]: "near" and "far"; "binary" (two classes); or one of "slow"
        (speed <= threshold) and "fast".
    """
    if split == "binary":
        return {
            SPLIT_BINARY: IoUTally.from_grids(
                binary_labels(pred.labels), binary_labels(gt.labels), mask.mask, 2
            )
        }
    if split == "near_far":
        if grid is None:
            raise ConfigError("The near/far split needs the grid")
        near, far = near_far_masks(grid)
        visible = mask.mask.astype(bool)
        n = class_set.num_outputs
        return {
            SPLIT_NEAR: IoUTally.from_grids(pred.labels, gt.labels, visible & near, n),
            SPLIT_FAR: IoUTally.from_grids(pred.labels, gt.labels, visible & far, n),
        }
    if split == "speed":
        if speed is None or speed_threshold is None:
            raise ConfigError("The speed split needs a speed and a threshold")
        bucket = SPLIT_SLOW if speed <= speed_threshold else SPLIT_FAST
        return {
            bucket: IoUTally.from_grids(
                pred.labels, gt.labels, mask.mask, class_set.num_outputs
            )
        }
    raise ConfigError(f"Unknown split {split!r}; expected one of {SPLIT_KINDS}")


@dataclass
class EvalReport:
    """
    Micro-aggregated tallies of a split of samples, keyed by "all", "binary", "near", "far",
    "slow" and "fast".
    """

    class_names: tuple[str, ...]
    tallies: dict[str, IoUTally]
    excluded: tuple[int, ...] = ()
    sample_count: int = 0
    speed_threshold: Optional[float] = None
    voxel_count: int = 0

    @property
    def per_class_iou(self) -> list[Optional[float]]:
        return self.tallies[SPLIT_ALL].ious()

    @property
    def miou(self) -> Optional[float]:
        return miou(self.per_class_iou, self.excluded)

    @property
    def binary_iou(self) -> tuple[Optional[float], Optional[float]]:
        """(Free IoU, Non-Free IoU) after the binary remap."""
        free, nonfree = self.tallies[SPLIT_BINARY].ious()
        return free, nonfree

    def split_miou(self, split: str) -> Optional[float]:
        return miou(self.tallies[split].ious(), self.excluded)

    def summary(self) -> dict[str, Any]:
        """A JSON-ready record of the report."""
        free, nonfree = self.binary_iou
        return {
            "class_names": list(self.class_names),
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "binary_free_iou": free,
            "binary_nonfree_iou": nonfree,
            "near_miou": self.split_miou(SPLIT_NEAR),
            "far_miou": self.split_miou(SPLIT_FAR),
            "slow_miou": self.split_miou(SPLIT_SLOW),
            "fast_miou": self.split_miou(SPLIT_FAST),
            "excluded_classes": list(self.excluded),
            "sample_count": self.sample_count,
            "voxel_count": self.voxel_count,
            "speed_threshold": self.speed_threshold,
        }


def evaluate(
    preds: Sequence[OccupancyGrid],
    gts: Sequence[OccupancyGrid],
    masks: Sequence[VisibilityMask],
    speeds: Sequence[float],
    class_set: ClassSet,
    grid: GridSpec,
    excluded: Sequence[int] = (),
    speed_threshold: Optional[float] = None,
) -> EvalReport:
    """
    Evaluate a split. The speed threshold defaults to the median ego speed of the samples.

    Exceptions:
        ShapeError: if the sequences differ in length or a grid does not match.
    """
    count = len(preds)
    if not len(gts) == len(masks) == len(speeds) == count:
        raise ShapeError("preds, gts, masks and speeds must have the same length")
    if any(c < 0 or c >= class_set.num_outputs for c in excluded):
        raise ConfigError(f"Excluded classes {list(excluded)} are not all valid classes")
    if speed_threshold is None and count:
        speed_threshold = float(np.median(np.asarray(speeds, dtype=np.float64)))

    n = class_set.num_outputs
    tallies = {
        SPLIT_ALL: IoUTally.zeros(n),
        SPLIT_BINARY: IoUTally.zeros(2),
        SPLIT_NEAR: IoUTally.zeros(n),
        SPLIT_FAR: IoUTally.zeros(n),
        SPLIT_SLOW: IoUTally.zeros(n),
        SPLIT_FAST: IoUTally.zeros(n),
    }
    voxels = 0
    for pred, gt, mask, speed in zip(preds, gts, masks, speeds):
        tallies[SPLIT_ALL] += IoUTally.from_grids(pred.labels, gt.labels, mask.mask, n)
        for kind in SPLIT_KINDS:
            for name, tally in split_eval(
                pred, gt, mask, kind, class_set, grid, speed, speed_threshold
            ).items():
                tallies[name] += tally
        voxels += int(mask.mask.sum())
    return EvalReport(
        tuple(class_set.names),
        tallies,
        tuple(excluded),
        count,
        speed_threshold,
        voxels,
    )
