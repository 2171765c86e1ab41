"""
Temporal cost volume construction and the refinement head that turns it into per-voxel
occupancy weights.

For every voxel of the current frame, N points are sampled along its line of sight, carried
into each of the K frames of the window by the relative ego pose, and the features of that
frame are sampled there. The stack of K x N feature vectors per voxel is the cost volume F.
A small convolution stack maps F to a weight in (0, 1) per voxel, and the current volume
features are scaled by it.

Slot order along the K*N axis is frame-major (current frame first, then history newest to
oldest) and stride-ascending within a frame. The current frame is part of F, so a window of
K frames yields K*N slots.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from cvtocc.errors import ConfigError, ShapeError
from cvtocc.grid_geometry import (
    FramePose,
    GridSpec,
    StrideSet,
    VoxelIndex,
    WorldPoint,
    relative_transform,
    sample_sight_points,
    sample_sight_points_array,
    sight_direction,
    sight_directions_array,
    transform_point,
    transform_points,
    voxel_centers_world,
    voxel_to_world,
    world_to_voxel,
    world_to_voxel_array,
)
from cvtocc.tensor_autodiff import (
    DenseTensor,
    ParamTensor,
    Tape,
    conv3d,
    elementwise_mul,
    relu,
    reshape,
    sample_volume,
    sigmoid,
)

TIMESTAMP_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class VolumeFeatures:
    """Volume features V_t [H, W, Z, C] of one frame, in that frame's own ego coordinates."""

    features: np.ndarray
    frame_pose: FramePose
    grid: GridSpec

    def __post_init__(self) -> None:
        shape = self.features.shape
        if len(shape) != 4 or shape[:3] != self.grid.shape or shape[3] < 1:
            raise ShapeError(
                f"Volume features of shape {shape} do not fit grid {self.grid.shape}"
            )

    @property
    def channels(self) -> int:
        return self.features.shape[3]


@dataclass(frozen=True, eq=False)
class TemporalWindow:
    """
    The current frame plus K-1 historical frames ordered newest to oldest.

    Exceptions:
        ConfigError: if the grids differ or the timestamps do not step back by frame_interval.
    """

    current: VolumeFeatures
    history: tuple[VolumeFeatures, ...]
    frame_interval: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "history", tuple(self.history))
        frames = self.frames
        for frame in frames:
            if frame.grid != self.current.grid:
                raise ConfigError("All frames of a window must share one grid")
            if frame.channels != self.current.channels:
                raise ConfigError("All frames of a window must have the same channel count")
        for newer, older in zip(frames, frames[1:]):
            step = newer.frame_pose.timestamp - older.frame_pose.timestamp
            if abs(step - self.frame_interval) > TIMESTAMP_TOLERANCE:
                raise ConfigError(
                    f"Frame timestamps must step back by {self.frame_interval} s, got {step} s"
                )

    @property
    def frames(self) -> tuple[VolumeFeatures, ...]:
        return (self.current,) + self.history

    @property
    def frame_count(self) -> int:
        return 1 + len(self.history)

    @property
    def time_span(self) -> float:
        return (self.frame_count - 1) * self.frame_interval


class CostVolume(NamedTuple):
    """F [H, W, Z, K*N, C] and the sampling validity [H, W, Z, K*N] as 0/1."""

    features: np.ndarray
    validity: np.ndarray


class RefinedVolume(NamedTuple):
    """V_occ [H, W, Z, C] and the weights W [H, W, Z] it was scaled by."""

    v_occ: DenseTensor
    weights: DenseTensor


@dataclass
class CvtHeadParams:
    """
    Two 3x3x3 convolutions over the flattened K*N*C channels: K*N*C -> hidden, rectifier,
    hidden -> 1.
    """

    conv1_kernel: ParamTensor
    conv1_bias: ParamTensor
    conv2_kernel: ParamTensor
    conv2_bias: ParamTensor

    @staticmethod
    def initialise(
        in_channels: int,
        hidden_width: int,
        rng: np.random.Generator,
        dtype: type = np.float32,
        kernel_size: int = 3,
    ) -> "CvtHeadParams":
        """
        Uniform initialisation in +-1/sqrt(fan_in); the final bias starts at 0 so the initial
        weights sit near 0.5.
        """
        k = kernel_size
        bound1 = 1.0 / np.sqrt(k**3 * in_channels)
        bound2 = 1.0 / np.sqrt(k**3 * hidden_width)
        shape1 = (k, k, k, in_channels, hidden_width)
        shape2 = (k, k, k, hidden_width, 1)
        return CvtHeadParams(
            ParamTensor("cvt.conv1.kernel", rng.uniform(-bound1, bound1, shape1).astype(dtype)),
            ParamTensor("cvt.conv1.bias", rng.uniform(-bound1, bound1, hidden_width).astype(dtype)),
            ParamTensor("cvt.conv2.kernel", rng.uniform(-bound2, bound2, shape2).astype(dtype)),
            ParamTensor("cvt.conv2.bias", np.zeros(1, dtype=dtype)),
        )

    def parameters(self) -> list[ParamTensor]:
        return [self.conv1_kernel, self.conv1_bias, self.conv2_kernel, self.conv2_bias]


def cost_volume_shape(
    grid: GridSpec, frame_count: int, stride_count: int, channels: int
) -> tuple[int, int, int, int, int]:
    """Shape of F for a window, without building it."""
    h, w, z = grid.shape
    return (h, w, z, frame_count * stride_count, channels)


def _frame_transforms(window: TemporalWindow) -> list[Optional[np.ndarray]]:
    # None marks the current frame, which is sampled without a transform.
    pose_now = window.current.frame_pose
    return [None] + [relative_transform(pose_now, f.frame_pose) for f in window.history]


def build_cost_volume(
    window: TemporalWindow, strides: StrideSet, interpolation: str = "trilinear"
) -> CostVolume:
    """
    Build the cost volume F of a window.

    Args:
        window (TemporalWindow): current and historical volume features.
        strides (StrideSet): offsets along each voxel's sight ray, in cell units.
        interpolation (str): "trilinear" or "bilinear" (nearest z slice).

    Exceptions:
        ConfigError: if the frames of the window do not share one grid.

    Returns:
        CostVolume: features [H, W, Z, K*N, C] with out-of-range samples zeroed, and validity.
    """
    assert isinstance(window, TemporalWindow), "window must be a TemporalWindow"
    assert isinstance(strides, StrideSet), "strides must be a StrideSet"
    grid = window.current.grid
    n = len(strides)
    shape = cost_volume_shape(grid, window.frame_count, n, window.current.channels)

    points = voxel_centers_world(grid)
    samples = sample_sight_points_array(
        points, sight_directions_array(points, grid), strides, grid
    )

    features = np.zeros(shape, dtype=window.current.features.dtype)
    validity = np.zeros(shape[:4], dtype=np.uint8)
    for slot, (frame, transform) in enumerate(
        zip(window.frames, _frame_transforms(window))
    ):
        projected = samples if transform is None else transform_points(transform, samples)
        coords = world_to_voxel_array(projected, grid)
        values, valid = sample_volume(frame.features, coords, interpolation)
        features[:, :, :, slot * n : (slot + 1) * n, :] = values
        validity[:, :, :, slot * n : (slot + 1) * n] = valid
    return CostVolume(features, validity)


def _reference_interpolate(
    volume: np.ndarray, u: float, v: float, w: float, interpolation: str
) -> tuple[np.ndarray, bool]:
    height, width, depth, channels = volume.shape
    if not (0 <= u <= width - 1 and 0 <= v <= height - 1 and 0 <= w <= depth - 1):
        return np.zeros(channels, dtype=np.float64), False
    if interpolation == "bilinear":
        w = float(np.floor(w + 0.5))
    total = np.zeros(channels, dtype=np.float64)
    base = (int(np.floor(u)), int(np.floor(v)), int(np.floor(w)))
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                i, j, k = base[0] + di, base[1] + dj, base[2] + dk
                weight = (
                    (1 - abs(u - i)) * (1 - abs(v - j)) * (1 - abs(w - k))
                )
                if weight <= 0 or i >= width or j >= height or k >= depth:
                    continue
                total += weight * volume[j, i, k].astype(np.float64)
    return total, True


def brute_force_cost_volume(
    window: TemporalWindow, strides: StrideSet, interpolation: str = "trilinear"
) -> CostVolume:
    """
    Straight-line per-voxel version of build_cost_volume with its own interpolation, used to
    check the vectorised builder. Only suitable for tiny grids.
    """
    grid = window.current.grid
    for frame in window.frames:
        if frame.grid != grid:
            raise ConfigError("All frames of a window must share one grid")
    n = len(strides)
    shape = cost_volume_shape(grid, window.frame_count, n, window.current.channels)
    features = np.zeros(shape, dtype=window.current.features.dtype)
    validity = np.zeros(shape[:4], dtype=np.uint8)
    pose_now = window.current.frame_pose
    h, w, z = grid.shape

    for j in range(h):
        for i in range(w):
            for k in range(z):
                p = voxel_to_world(VoxelIndex(i, j, k), grid)
                line = sample_sight_points(p, sight_direction(p, grid), strides, grid)
                for f, frame in enumerate(window.frames):
                    m = relative_transform(pose_now, frame.frame_pose)
                    for s, point in enumerate(line):
                        moved: WorldPoint = point if f == 0 else transform_point(m, point)
                        coord = world_to_voxel(moved, grid)
                        value, ok = _reference_interpolate(
                            frame.features, coord.u, coord.v, coord.w, interpolation
                        )
                        features[j, i, k, f * n + s] = value
                        validity[j, i, k, f * n + s] = ok
    return CostVolume(features, validity)


def refine_volume(
    window: TemporalWindow,
    cv: CostVolume,
    params: CvtHeadParams,
    tape: Optional[Tape] = None,
) -> RefinedVolume:
    """
    V_occ = V_t * sigmoid(conv(relu(conv(F)))), with F flattened to K*N*C channels.

    Exceptions:
        ShapeError: if the cost volume, the features or the parameters disagree in shape.
    """
    h, w, z, slots, channels = cv.features.shape
    if (h, w, z) != window.current.grid.shape or channels != window.current.channels:
        raise ShapeError(
            f"Cost volume {cv.features.shape} does not match the window's current frame"
        )
    flat = DenseTensor(cv.features.reshape(h, w, z, slots * channels))
    hidden = relu(conv3d(flat, params.conv1_kernel, params.conv1_bias, tape), tape)
    logits = conv3d(hidden, params.conv2_kernel, params.conv2_bias, tape)
    weights = sigmoid(reshape(logits, (h, w, z), tape), tape)
    v_occ = elementwise_mul(DenseTensor(window.current.features), weights, tape)
    return RefinedVolume(v_occ, weights)


def pass_through_volume(window: TemporalWindow) -> RefinedVolume:
    """Refinement disabled: V_occ = V_t with unit weights."""
    features = window.current.features
    return RefinedVolume(
        DenseTensor(features), DenseTensor(np.ones(features.shape[:3], dtype=features.dtype))
    )
