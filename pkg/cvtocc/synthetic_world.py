"""
Synthetic multi-frame scenes for training and evaluating the refinement head.

A scene is a set of static axis-aligned boxes on a ground plane. The ego vehicle drives a
straight line along +x at constant speed. Each frame sees the scene in its own ego
coordinates: ground-truth labels come from rasterising the boxes, visibility from casting rays
out of the grid center, and volume features from smearing the class embedding of each ray's
first hit along the whole ray. The smear reproduces the depth ambiguity of monocular lifting:
every voxel on a line of sight carries the same feature, occupied or not.

Functions:
    generate_scene(cfg, index)
    rasterize_occupancy(scene, pose, grid)
    cast_visibility(occ, grid)
    synthesize_ambiguous_features(occ, class_embeddings, grid, noise_sigma, pose, rng)
    build_frame_sample(scene, cfg, embeddings, t_index)
    generate_dataset(cfg, train_count, eval_count)
"""

from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional, Tuple

import numpy as np

from cvtocc.constants import SPLIT_EVAL, SPLIT_TRAIN
from cvtocc.cost_volume import TemporalWindow, VolumeFeatures
from cvtocc.errors import ConfigError, HistoryRangeError
from cvtocc.grid_geometry import (
    FramePose,
    GridSpec,
    transform_points,
    voxel_centers_world,
)
from cvtocc.occupancy_head import FREE_CLASS, ClassSet, OccupancyGrid, VisibilityMask
from cvtocc.printing import console

# Seed stream reserved for the class embeddings, distinct from any scene index.
EMBEDDING_STREAM = 2**31 - 1
BOX_PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of the scene generator and the ego trajectory."""

    grid: GridSpec
    class_set: ClassSet
    box_count_range: Tuple[int, int] = (1, 4)
    box_size_range: Tuple[float, float] = (1.0, 4.0)
    ego_speed: float = 2.0
    ego_speed_spread: float = 0.5
    frame_interval: float = 0.5
    frame_count: int = 7
    ground_height: float = -1.0
    ground_class: int = 1
    noise_sigma: float = 0.05
    feature_channels: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        low, high = self.box_count_range
        if low < 0 or high < low:
            raise ConfigError(f"Invalid box count range {self.box_count_range}")
        low_size, high_size = self.box_size_range
        if low_size <= 0 or high_size < low_size:
            raise ConfigError(f"Invalid box size range {self.box_size_range}")
        if self.ego_speed < 0 or not 0 <= self.ego_speed_spread <= 1:
            raise ConfigError("Ego speed must be nonnegative and its spread within [0, 1]")
        if self.frame_interval <= 0:
            raise ConfigError("The frame interval must be positive")
        if self.frame_count < 1:
            raise ConfigError("The frame count must be at least 1")
        if not 1 <= self.ground_class <= self.class_set.num_semantic:
            raise ConfigError(f"Ground class {self.ground_class} is not a semantic class")
        if self.noise_sigma < 0 or self.feature_channels < 1:
            raise ConfigError("Noise must be nonnegative and channels at least 1")

    @staticmethod
    def from_config(config: dict[str, Any]) -> "SceneConfig":
        grid = GridSpec(
            height_cells=config["grid_height"],
            width_cells=config["grid_width"],
            depth_cells=config["grid_depth"],
            voxel_size=config["voxel_size"],
            center_offset=tuple(config["center_offset"]),
        )
        return SceneConfig(
            grid=grid,
            class_set=ClassSet(tuple(config["class_names"])),
            box_count_range=(config["box_count_min"], config["box_count_max"]),
            box_size_range=(config["box_size_min"], config["box_size_max"]),
            ego_speed=config["ego_speed"],
            ego_speed_spread=config["ego_speed_spread"],
            frame_interval=config["frame_interval"],
            frame_count=config["frame_count"],
            ground_height=config["ground_height"],
            ground_class=config["ground_class"],
            noise_sigma=config["noise_sigma"],
            feature_channels=config["feature_channels"],
            seed=config["seed"],
        )


class Box(NamedTuple):
    """Axis-aligned box in the global frame; lower and upper are (x, y, z) corners."""

    lower: Tuple[float, float, float]
    upper: Tuple[float, float, float]
    class_id: int


@dataclass(frozen=True)
class Scene:
    boxes: Tuple[Box, ...]
    ground_height: float
    ground_class: int
    ego_speed: float
    index: int = 0


@dataclass(frozen=True, eq=False)
class FrameSample:
    window: TemporalWindow
    gt: OccupancyGrid
    mask: VisibilityMask
    ego_speed: float


class VisibilityResult(NamedTuple):
    """
    Visibility mask plus, per ray, its boundary cell and first occupied cell.

    rays and first_hit are integer arrays [R, 3] of (i, j, k); first_hit rows are -1 for rays
    that hit nothing. ray_lookup [H, W, Z] gives, for every voxel, the ray whose first hit is
    smeared onto it; see smear_sources. -1 marks the unoccupied center voxel.
    """

    mask: VisibilityMask
    rays: np.ndarray
    first_hit: np.ndarray
    ray_lookup: np.ndarray


@dataclass
class SyntheticDataset:
    grid: GridSpec
    class_set: ClassSet
    frame_interval: float
    frame_count: int
    train: list[FrameSample] = field(default_factory=list)
    eval: list[FrameSample] = field(default_factory=list)

    def split(self, name: str) -> list[FrameSample]:
        assert name in (SPLIT_TRAIN, SPLIT_EVAL), f"unknown split {name}"
        return self.train if name == SPLIT_TRAIN else self.eval


def ego_pose(speed: float, frame_interval: float, t: int) -> FramePose:
    """Pose of frame t on the straight-line trajectory, at timestamp t * frame_interval."""
    timestamp = t * frame_interval
    return FramePose.from_translation_yaw(speed * timestamp, 0.0, 0.0, 0.0, timestamp)


def _cell_center_bounds(grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Ego-frame bounds of the voxel centers, (x, y, z) lower and upper."""
    centers = np.array(grid.center_offset)
    dims = np.array([grid.width_cells, grid.height_cells, grid.depth_cells])
    lower = centers - dims / 2 * grid.voxel_size
    upper = centers + (dims / 2 - 1) * grid.voxel_size
    return lower, upper


def generate_scene(cfg: SceneConfig, index: int = 0) -> Scene:
    """
    Draw a scene. Deterministic in (cfg.seed, index).

    Boxes stand on the ground plane, are placed where every frame of the trajectory ending at
    frame K-1 can see them (or within the current frame's extent when those frames share no
    common area), and keep clear of the ego path.
    """
    assert isinstance(cfg, SceneConfig), "cfg must be a SceneConfig"
    rng = np.random.default_rng([cfg.seed, index])
    speed = cfg.ego_speed * (1.0 + cfg.ego_speed_spread * rng.uniform(-1.0, 1.0))

    ego_x = [speed * t * cfg.frame_interval for t in range(cfg.frame_count)]
    lower, upper = _cell_center_bounds(cfg.grid)
    x_low, x_high = ego_x[-1] + lower[0], ego_x[0] + upper[0]
    if x_high <= x_low:
        x_low, x_high = ego_x[-1] + lower[0], ego_x[-1] + upper[0]
    s = cfg.grid.voxel_size

    semantic = [
        c for c in range(1, cfg.class_set.num_outputs) if c != cfg.ground_class
    ] or [cfg.ground_class]
    count = int(rng.integers(cfg.box_count_range[0], cfg.box_count_range[1] + 1))
    boxes: list[Box] = []
    for _ in range(count):
        for _ in range(BOX_PLACEMENT_ATTEMPTS):
            size = rng.uniform(cfg.box_size_range[0], cfg.box_size_range[1], 3)
            cx = rng.uniform(x_low, x_high)
            cy = rng.uniform(lower[1], upper[1])
            box_lower = (cx - size[0] / 2, cy - size[1] / 2, cfg.ground_height)
            box_upper = (cx + size[0] / 2, cy + size[1] / 2, cfg.ground_height + size[2])
            blocks_ego = any(
                box_lower[0] - s <= x <= box_upper[0] + s
                and box_lower[1] - s <= 0.0 <= box_upper[1] + s
                for x in ego_x
            )
            if not blocks_ego:
                class_id = int(semantic[rng.integers(len(semantic))])
                boxes.append(Box(box_lower, box_upper, class_id))
                break
    return Scene(tuple(boxes), cfg.ground_height, cfg.ground_class, float(speed), index)


def rasterize_occupancy(scene: Scene, pose: FramePose, grid: GridSpec) -> OccupancyGrid:
    """
    Label every voxel of the ego frame: the class of the last box containing its center,
    else the ground class below the ground plane, else Free.
    """
    centers = transform_points(pose.transform, voxel_centers_world(grid))
    labels = np.full(grid.shape, FREE_CLASS, dtype=np.uint8)
    labels[centers[..., 2] < scene.ground_height] = scene.ground_class
    for box in scene.boxes:
        inside = np.all(
            (centers >= np.array(box.lower)) & (centers <= np.array(box.upper)), axis=-1
        )
        labels[inside] = box.class_id
    return OccupancyGrid(labels)


def boundary_cells(grid: GridSpec) -> np.ndarray:
    """All cells on the faces of the grid as (i, j, k) rows, in [j, i, k] raster order."""
    h, w, z = grid.shape
    j, i, k = np.meshgrid(np.arange(h), np.arange(w), np.arange(z), indexing="ij")
    on_face = (i == 0) | (i == w - 1) | (j == 0) | (j == h - 1) | (k == 0) | (k == z - 1)
    return np.stack([i[on_face], j[on_face], k[on_face]], axis=-1)


def traverse_rays(grid: GridSpec, targets: np.ndarray) -> np.ndarray:
    """
    3D digital traversal from the grid center to each target cell, all rays in lockstep.

    Returns:
        np.ndarray: visited cells [R, S, 3] as (i, j, k) in traversal order, -1 past the end.
    """
    # Shift by half a cell so cell c spans [c, c+1).
    origin = grid.center_coord + 0.5
    dims = np.array([grid.width_cells, grid.height_cells, grid.depth_cells])
    direction = targets + 0.5 - origin
    cell = np.broadcast_to(np.floor(origin).astype(np.int64), targets.shape).copy()
    step = np.sign(direction).astype(np.int64)

    moving = direction != 0
    safe = np.where(moving, direction, 1.0)
    boundary = np.where(step > 0, cell + 1, cell)
    t_max = np.where(moving, (boundary - origin) / safe, np.inf)
    t_delta = np.where(moving, np.abs(1.0 / safe), np.inf)

    visited = [cell.copy()]
    active = np.any(cell != targets, axis=1)
    rows = np.arange(len(targets))
    for _ in range(int(dims.sum()) + 3):
        if not active.any():
            break
        axis = np.argmin(t_max, axis=1)
        live = rows[active]
        live_axis = axis[active]
        cell[live, live_axis] += step[live, live_axis]
        t_max[live, live_axis] += t_delta[live, live_axis]
        recorded = np.where(active[:, None], cell, -1)
        visited.append(recorded)
        active &= np.any(cell != targets, axis=1) & np.all(
            (cell >= 0) & (cell < dims), axis=1
        )
    return np.stack(visited, axis=1)


def exit_lookup(grid: GridSpec, rays: np.ndarray) -> np.ndarray:
    """
    For every voxel, the index of the ray ending at the boundary cell where the voxel's own
    line of sight from the center leaves the grid; -1 for the center voxel.
    """
    h, w, z = grid.shape
    dims = np.array([w, h, z], dtype=np.float64)
    origin = grid.center_coord
    j, i, k = np.meshgrid(np.arange(h), np.arange(w), np.arange(z), indexing="ij")
    cells = np.stack([i, j, k], axis=-1).astype(np.float64)
    d = cells - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        t_axis = np.where(
            d > 0, (dims - 1 - origin) / d, np.where(d < 0, -origin / d, np.inf)
        )
    t = np.min(t_axis, axis=-1, keepdims=True)
    degenerate = ~np.isfinite(t[..., 0])
    t = np.where(np.isfinite(t), t, 0.0)
    exits = np.clip(np.floor(origin + t * d + 0.5), 0, dims - 1).astype(np.int64)

    ray_index = np.full((h, w, z), -1, dtype=np.int64)
    ray_index[rays[:, 1], rays[:, 0], rays[:, 2]] = np.arange(len(rays))
    lookup = ray_index[exits[..., 1], exits[..., 0], exits[..., 2]]
    return np.where(degenerate, -1, lookup)


def smear_sources(
    grid: GridSpec,
    rays: np.ndarray,
    visited: np.ndarray,
    first_hit: np.ndarray,
) -> np.ndarray:
    """
    Pick, for every voxel, the ray whose first hit it carries.

    A voxel that is the first hit of some ray takes that ray, so it carries its own class.
    Any other voxel takes the ray ending where its line of sight exits when that ray passes
    through it, else the lowest-numbered ray passing through it, else the exit ray anyway.
    The center voxel is -1 unless it is itself a first hit.

    Args:
        rays (np.ndarray): [R, 3] boundary cells.
        visited (np.ndarray): [R, S, 3] traversals from traverse_rays.
        first_hit (np.ndarray): [R, 3] first occupied cell per ray, -1 rows for misses.

    Returns:
        np.ndarray: ray index per voxel, shape [H, W, Z].
    """
    count = int(np.prod(grid.shape))
    ray_count = len(rays)
    valid = visited[..., 0] >= 0
    safe = np.where(valid[..., None], visited, 0)
    flat = np.ravel_multi_index((safe[..., 1], safe[..., 0], safe[..., 2]), grid.shape)
    ray_ids = np.broadcast_to(np.arange(ray_count)[:, None], flat.shape)
    passes = np.unique(ray_ids[valid] * count + flat[valid])

    exit_ray = exit_lookup(grid, rays).ravel()
    voxels = np.arange(count)
    exit_passes = (exit_ray >= 0) & np.isin(np.maximum(exit_ray, 0) * count + voxels, passes)
    lowest = np.full(count, ray_count, dtype=np.int64)
    np.minimum.at(lowest, flat[valid], ray_ids[valid])

    source = np.where(exit_passes, exit_ray, np.where(lowest < ray_count, lowest, exit_ray))
    source = np.where(exit_ray < 0, -1, source)

    has_hit = first_hit[:, 0] >= 0
    hits = first_hit[has_hit]
    source[np.ravel_multi_index((hits[:, 1], hits[:, 0], hits[:, 2]), grid.shape)] = np.flatnonzero(
        has_hit
    )
    return source.reshape(grid.shape)


def cast_visibility(occ: OccupancyGrid, grid: GridSpec) -> VisibilityResult:
    """
    Cast one ray from the grid center to every boundary cell. Cells up to and including the
    first occupied cell of a ray are visible; cells behind it are not (unless another ray
    sees them).
    """
    rays = boundary_cells(grid)
    visited = traverse_rays(grid, rays)
    valid = visited[..., 0] >= 0
    safe = np.where(valid[..., None], visited, 0)
    occupied = valid & (occ.labels[safe[..., 1], safe[..., 0], safe[..., 2]] != FREE_CLASS)

    steps = visited.shape[1]
    has_hit = occupied.any(axis=1)
    first_step = np.where(has_hit, np.argmax(occupied, axis=1), steps)
    seen = valid & (np.arange(steps)[None, :] <= first_step[:, None])

    mask = np.zeros(grid.shape, dtype=bool)
    mask[safe[..., 1][seen], safe[..., 0][seen], safe[..., 2][seen]] = True

    hit_rows = np.arange(len(rays))
    first_hit = np.where(
        has_hit[:, None],
        safe[hit_rows, np.minimum(first_step, steps - 1)],
        -1,
    )
    return VisibilityResult(
        VisibilityMask(mask), rays, first_hit, smear_sources(grid, rays, visited, first_hit)
    )


def class_embeddings(num_outputs: int, channels: int, seed: int) -> np.ndarray:
    """Unit-norm random embedding per class; row 0 (Free) is the zero vector."""
    rng = np.random.default_rng([seed, EMBEDDING_STREAM])
    vectors = rng.normal(size=(num_outputs, channels))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    vectors[FREE_CLASS] = 0.0
    return vectors.astype(np.float32)


def synthesize_ambiguous_features(
    occ: OccupancyGrid,
    embeddings: np.ndarray,
    grid: GridSpec,
    noise_sigma: float,
    pose: FramePose,
    rng: np.random.Generator,
    visibility: Optional[VisibilityResult] = None,
) -> VolumeFeatures:
    """
    Monocular-style features: every voxel carries the embedding of the first occupied cell of a
    ray passing through it (the ray chosen by smear_sources), plus Gaussian noise. Voxels whose
    ray hits nothing are zero.

    Args:
        occ (OccupancyGrid): labels of this frame.
        embeddings (np.ndarray): [M+1, C] class embeddings, row 0 zero.
        grid (GridSpec): the grid.
        noise_sigma (float): standard deviation of the noise added to written voxels.
        pose (FramePose): the frame's pose, carried into the result.
        rng (np.random.Generator): noise source.
        visibility (Optional[VisibilityResult]): a cast already made for `occ`.

    Returns:
        VolumeFeatures: features [H, W, Z, C] in float32.
    """
    assert not np.any(embeddings[FREE_CLASS]), "the Free embedding must be the zero vector"
    if visibility is None:
        visibility = cast_visibility(occ, grid)
    first_hit = visibility.first_hit
    hit_labels = np.zeros(len(first_hit), dtype=np.int64)
    has_hit = first_hit[:, 0] >= 0
    hits = first_hit[has_hit]
    hit_labels[has_hit] = occ.labels[hits[:, 1], hits[:, 0], hits[:, 2]]

    lookup = visibility.ray_lookup
    voxel_class = np.where(lookup >= 0, hit_labels[np.maximum(lookup, 0)], FREE_CLASS)
    features = embeddings[voxel_class].astype(np.float32)
    written = voxel_class != FREE_CLASS
    if noise_sigma > 0:
        noise = rng.normal(0.0, noise_sigma, (int(written.sum()), embeddings.shape[1]))
        features[written] += noise.astype(np.float32)
    return VolumeFeatures(features, pose, grid)


def build_frame_sample(
    scene: Scene,
    cfg: SceneConfig,
    embeddings: np.ndarray,
    t_index: Optional[int] = None,
) -> FrameSample:
    """
    Render the K-frame window ending at frame t_index (default K-1) of the scene's trajectory.

    Exceptions:
        HistoryRangeError: if t_index < K-1, i.e. the trajectory has too few earlier frames.
    """
    k = cfg.frame_count
    if t_index is None:
        t_index = k - 1
    if t_index < k - 1:
        raise HistoryRangeError(
            f"Frame {t_index} has only {t_index} earlier frames, {k - 1} needed"
        )
    frames: list[VolumeFeatures] = []
    gt: Optional[OccupancyGrid] = None
    mask: Optional[VisibilityMask] = None
    for t in range(t_index, t_index - k, -1):
        pose = ego_pose(scene.ego_speed, cfg.frame_interval, t)
        occ = rasterize_occupancy(scene, pose, cfg.grid)
        visibility = cast_visibility(occ, cfg.grid)
        rng = np.random.default_rng([cfg.seed, scene.index, t])
        frames.append(
            synthesize_ambiguous_features(
                occ, embeddings, cfg.grid, cfg.noise_sigma, pose, rng, visibility
            )
        )
        if t == t_index:
            gt, mask = occ, visibility.mask
    assert gt is not None and mask is not None
    window = TemporalWindow(frames[0], tuple(frames[1:]), cfg.frame_interval)
    return FrameSample(window, gt, mask, scene.ego_speed)


def ambiguity_rate(samples: list[FrameSample]) -> float:
    """Fraction of current-frame voxels with a nonzero feature that are Free in ground truth."""
    nonzero = 0
    smeared = 0
    for sample in samples:
        lit = np.any(sample.window.current.features != 0, axis=-1)
        nonzero += int(lit.sum())
        smeared += int((lit & (sample.gt.labels == FREE_CLASS)).sum())
    return smeared / nonzero if nonzero else 0.0


def generate_dataset(
    cfg: SceneConfig, train_count: int, eval_count: int, verbose: bool = False
) -> SyntheticDataset:
    """
    Generate train and eval samples; scene indices 0..train_count-1 go to train, the next
    eval_count to eval.
    """
    embeddings = class_embeddings(
        cfg.class_set.num_outputs, cfg.feature_channels, cfg.seed
    )
    dataset = SyntheticDataset(cfg.grid, cfg.class_set, cfg.frame_interval, cfg.frame_count)
    for index in range(train_count + eval_count):
        sample = build_frame_sample(generate_scene(cfg, index), cfg, embeddings)
        (dataset.train if index < train_count else dataset.eval).append(sample)
        if verbose and (index + 1) % 20 == 0:
            console.print(f"Generated [green bold]{index + 1}[/green bold] samples")
    return dataset
