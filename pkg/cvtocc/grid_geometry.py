"""
Voxel grid geometry: index/world conversions, sight-ray sampling and rigid projection between
ego frames.

Conventions:
    - A voxel index (i, j, k) pairs i with the grid width W on the x axis, j with the height H
      on the y axis and k with the vertical extent Z on the z axis. Dense arrays are laid out
      as [j, i, k, ...], i.e. H x W x Z x C.
    - Integer continuous coordinates (u, v, w) are cell centers; u runs along i, v along j,
      w along k.
    - The grid center (index (W/2, H/2, Z/2)) is the ego position, at world point center_offset.
    - Transforms use 4x4 homogeneous matrices acting on column vectors. The row-vector form
      p P_t P_{t-k}^{-1} equals, transposed, P_{t-k}^{-1} P_t p.
    - A rotation of +theta about z maps (1, 0, 0) to (cos theta, sin theta, 0).

Functions:
    voxel_to_world(idx, grid)
    world_to_voxel(p, grid)
    sight_direction(p, grid)
    sample_sight_points(p, direction, strides, grid)
    relative_transform(pose_now, pose_past)
    transform_point(m, p)
and array versions used by the cost volume builder.
"""

import math

from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np

from cvtocc.errors import BoundsError, ConfigError, InvalidPoseError

# Distance below which a point is considered to sit on the grid center.
CENTER_EPSILON = 1e-9
# Continuous coordinates this close to an integer are snapped onto it.
SNAP_EPSILON = 1e-9
ORTHONORMAL_TOLERANCE = 1e-6


@dataclass(frozen=True)
class GridSpec:
    """
    Dimensions and placement of a voxel grid.

    Attributes:
        height_cells (int): H, number of cells along y.
        width_cells (int): W, number of cells along x.
        depth_cells (int): Z, number of cells along z.
        voxel_size (float): edge length s of one cubic cell, in meters.
        center_offset (Tuple[float, float, float]): world position of the grid center.
    """

    height_cells: int
    width_cells: int
    depth_cells: int
    voxel_size: float
    center_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if min(self.height_cells, self.width_cells, self.depth_cells) < 1:
            raise ConfigError(
                f"Grid dimensions must be at least 1, got {self.shape}"
            )
        if not self.voxel_size > 0:
            raise ConfigError(f"Voxel size must be positive, got {self.voxel_size}")
        object.__setattr__(
            self, "center_offset", tuple(float(c) for c in self.center_offset)
        )

    @property
    def shape(self) -> Tuple[int, int, int]:
        """Array shape (H, W, Z)."""
        return (self.height_cells, self.width_cells, self.depth_cells)

    @property
    def center_coord(self) -> np.ndarray:
        """Continuous coordinate (u, v, w) of the grid center."""
        return np.array(
            [self.width_cells / 2, self.height_cells / 2, self.depth_cells / 2]
        )

    @property
    def half_extent_x(self) -> float:
        """Half of the grid's extent along x, in meters."""
        return self.width_cells * self.voxel_size / 2

    def contains(self, idx: "VoxelIndex") -> bool:
        return (
            0 <= idx.i < self.width_cells
            and 0 <= idx.j < self.height_cells
            and 0 <= idx.k < self.depth_cells
        )


class VoxelIndex(NamedTuple):
    i: int
    j: int
    k: int


class WorldPoint(NamedTuple):
    x: float
    y: float
    z: float


class ContinuousVoxelCoord(NamedTuple):
    u: float
    v: float
    w: float


class SightDirection(NamedTuple):
    dx: float
    dy: float
    dz: float

    @property
    def is_zero(self) -> bool:
        return self.dx == 0.0 and self.dy == 0.0 and self.dz == 0.0


# Sentinel for the voxel sitting on the grid center, which has no line of sight.
ZERO_DIRECTION = SightDirection(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class StrideSet:
    """
    Offsets along the sight ray, in cell units.

    Invariant: at least one stride, strictly increasing, contains 0.
    """

    strides: Tuple[float, ...] = (-4, -3, -2, -1, 0, 1, 2, 3, 4)

    def __post_init__(self) -> None:
        values = tuple(float(n) for n in self.strides)
        if len(values) < 1:
            raise ConfigError("A stride set needs at least one stride")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ConfigError(f"Strides must be strictly increasing, got {values}")
        if 0.0 not in values:
            raise ConfigError(f"Strides must contain 0, got {values}")
        object.__setattr__(self, "strides", values)

    def __len__(self) -> int:
        return len(self.strides)

    @property
    def zero_slot(self) -> int:
        """Position of the 0 stride."""
        return self.strides.index(0.0)


@dataclass(frozen=True, eq=False)
class FramePose:
    """
    Ego-to-global rigid transform P_t at a timestamp.

    Exceptions:
        InvalidPoseError: if the matrix is not 4x4, not finite, has a non-orthonormal rotation
        block or a last row other than (0, 0, 0, 1).
    """

    transform: np.ndarray
    timestamp: float

    def __post_init__(self) -> None:
        matrix = np.array(self.transform, dtype=np.float64)
        if matrix.shape != (4, 4) or not np.all(np.isfinite(matrix)):
            raise InvalidPoseError("A pose must be a finite 4x4 matrix")
        rotation = matrix[:3, :3]
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOLERANCE:
            raise InvalidPoseError("The rotation block of a pose must be orthonormal")
        if np.linalg.det(rotation) < 0:
            raise InvalidPoseError("The rotation block of a pose must be a proper rotation")
        if not np.array_equal(matrix[3], np.array([0.0, 0.0, 0.0, 1.0])):
            raise InvalidPoseError("The last row of a pose must be (0, 0, 0, 1)")
        matrix.setflags(write=False)
        object.__setattr__(self, "transform", matrix)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @staticmethod
    def from_translation_yaw(
        x: float, y: float, z: float, yaw: float, timestamp: float
    ) -> "FramePose":
        """Pose with a rotation of `yaw` radians about z followed by a translation."""
        c, s = math.cos(yaw), math.sin(yaw)
        matrix = np.array(
            [
                [c, -s, 0.0, x],
                [s, c, 0.0, y],
                [0.0, 0.0, 1.0, z],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )
        return FramePose(matrix, timestamp)

    @property
    def translation(self) -> np.ndarray:
        return self.transform[:3, 3]


def _snap(values: np.ndarray) -> np.ndarray:
    rounded = np.round(values)
    return np.where(np.abs(values - rounded) < SNAP_EPSILON, rounded, values)


def voxel_to_world(idx: VoxelIndex, grid: GridSpec) -> WorldPoint:
    """
    Center of a voxel in ego coordinates: x = (i - W/2) s, y = (j - H/2) s, z = (k - Z/2) s,
    plus the grid's center offset.

    Exceptions:
        BoundsError: if the index lies outside the grid.
    """
    assert isinstance(grid, GridSpec), "grid must be a GridSpec"
    if not grid.contains(idx):
        raise BoundsError(f"Voxel index {tuple(idx)} is outside grid {grid.shape}")
    s = grid.voxel_size
    ox, oy, oz = grid.center_offset
    return WorldPoint(
        (idx.i - grid.width_cells / 2) * s + ox,
        (idx.j - grid.height_cells / 2) * s + oy,
        (idx.k - grid.depth_cells / 2) * s + oz,
    )


def world_to_voxel(p: WorldPoint, grid: GridSpec) -> ContinuousVoxelCoord:
    """
    Inverse of voxel_to_world on continuous coordinates. Out-of-grid points are returned as-is.
    """
    assert isinstance(grid, GridSpec), "grid must be a GridSpec"
    u, v, w = world_to_voxel_array(np.array(p, dtype=np.float64), grid)
    return ContinuousVoxelCoord(float(u), float(v), float(w))


def sight_direction(p: WorldPoint, grid: GridSpec) -> SightDirection:
    """
    Unit vector from the grid center (the ego position) to p, or ZERO_DIRECTION when p is
    within CENTER_EPSILON meters of the center.
    """
    d = np.array(p, dtype=np.float64) - np.array(grid.center_offset)
    norm = float(np.linalg.norm(d))
    if norm < CENTER_EPSILON:
        return ZERO_DIRECTION
    return SightDirection(*(float(c) for c in d / norm))


def sample_sight_points(
    p: WorldPoint, direction: SightDirection, strides: StrideSet, grid: GridSpec
) -> list[WorldPoint]:
    """
    Points p + d * (n * s) for every stride n, in stride order. Strides are in cell units.
    For the zero direction every point equals p.
    """
    assert isinstance(strides, StrideSet), "strides must be a StrideSet"
    points = sample_sight_points_array(
        np.array(p, dtype=np.float64),
        np.array(direction, dtype=np.float64),
        strides,
        grid,
    )
    return [WorldPoint(*(float(c) for c in row)) for row in points]


def rigid_inverse(m: np.ndarray) -> np.ndarray:
    """
    Inverse of a rigid 4x4 transform, [R^T, -R^T t].

    Exceptions:
        InvalidPoseError: if the rotation block is singular.
    """
    rotation = m[:3, :3]
    if abs(np.linalg.det(rotation)) < 1e-12:
        raise InvalidPoseError("Pose matrix is not invertible")
    inverse = np.eye(4)
    inverse[:3, :3] = rotation.T
    inverse[:3, 3] = -rotation.T @ m[:3, 3]
    return inverse


def relative_transform(pose_now: FramePose, pose_past: FramePose) -> np.ndarray:
    """
    Transform taking current-ego coordinates to past-ego coordinates, P_past^{-1} P_now.

    Args:
        pose_now (FramePose): ego-to-global pose of the current frame.
        pose_past (FramePose): ego-to-global pose of the historical frame.

    Exceptions:
        InvalidPoseError: if a pose matrix is not invertible.

    Returns:
        np.ndarray: 4x4 rigid matrix.
    """
    assert isinstance(pose_now, FramePose) and isinstance(
        pose_past, FramePose
    ), "poses must be FramePose objects"
    rigid_inverse(pose_now.transform)
    return rigid_inverse(pose_past.transform) @ pose_now.transform


def transform_point(m: np.ndarray, p: WorldPoint) -> WorldPoint:
    """Apply a homogeneous transform to a point."""
    x, y, z = transform_points(m, np.array(p, dtype=np.float64))
    return WorldPoint(float(x), float(y), float(z))


# Array versions. Points are arrays whose last axis holds (x, y, z).


def voxel_centers_world(grid: GridSpec) -> np.ndarray:
    """World positions of every voxel center, shape (H, W, Z, 3), laid out [j, i, k]."""
    s = grid.voxel_size
    ox, oy, oz = grid.center_offset
    xs = (np.arange(grid.width_cells) - grid.width_cells / 2) * s + ox
    ys = (np.arange(grid.height_cells) - grid.height_cells / 2) * s + oy
    zs = (np.arange(grid.depth_cells) - grid.depth_cells / 2) * s + oz
    y, x, z = np.meshgrid(ys, xs, zs, indexing="ij")
    return np.stack([x, y, z], axis=-1)


def world_to_voxel_array(points: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Continuous (u, v, w) coordinates for an array of world points."""
    offset = np.array(grid.center_offset)
    return _snap((points - offset) / grid.voxel_size + grid.center_coord)


def sight_directions_array(points: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Unit directions from the grid center, zero rows for points on the center."""
    d = points - np.array(grid.center_offset)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    degenerate = norm < CENTER_EPSILON
    return np.where(degenerate, 0.0, d / np.where(degenerate, 1.0, norm))


def sample_sight_points_array(
    points: np.ndarray, directions: np.ndarray, strides: StrideSet, grid: GridSpec
) -> np.ndarray:
    """Sight samples for an array of points, shape (..., N, 3)."""
    offsets = np.array(strides.strides) * grid.voxel_size
    return points[..., None, :] + directions[..., None, :] * offsets[:, None]


def transform_points(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a homogeneous transform to an array of points."""
    return points @ m[:3, :3].T + m[:3, 3]
