import math
import unittest

import numpy as np

from cvtocc.errors import BoundsError, ConfigError, InvalidPoseError
from cvtocc.grid_geometry import (
    ZERO_DIRECTION,
    FramePose,
    GridSpec,
    StrideSet,
    VoxelIndex,
    WorldPoint,
    relative_transform,
    sample_sight_points,
    sight_direction,
    transform_point,
    transform_points,
    voxel_centers_world,
    voxel_to_world,
    world_to_voxel,
    world_to_voxel_array,
)


def random_rigid(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    m = np.eye(4)
    m[:3, :3] = q
    m[:3, 3] = rng.uniform(-10, 10, 3)
    return m


class TestGridSpec(unittest.TestCase):
    def test_rejects_empty_dimension(self):
        with self.assertRaises(ConfigError):
            GridSpec(0, 4, 4, 0.5)

    def test_rejects_nonpositive_voxel_size(self):
        with self.assertRaises(ConfigError):
            GridSpec(4, 4, 4, 0.0)

    def test_shape_is_height_width_depth(self):
        self.assertEqual(GridSpec(3, 5, 2, 1.0).shape, (3, 5, 2))


class TestVoxelWorld(unittest.TestCase):
    def test_center_voxel_maps_to_origin(self):
        grid = GridSpec(200, 200, 16, 0.4)
        self.assertEqual(voxel_to_world(VoxelIndex(100, 100, 8), grid), WorldPoint(0.0, 0.0, 0.0))

    def test_corner_voxel(self):
        grid = GridSpec(200, 200, 16, 0.4)
        p = voxel_to_world(VoxelIndex(0, 0, 0), grid)
        self.assertAlmostEqual(p.x, -40.0, places=12)
        self.assertAlmostEqual(p.y, -40.0, places=12)
        self.assertAlmostEqual(p.z, -3.2, places=12)

    def test_center_offset_shifts_points(self):
        grid = GridSpec(4, 4, 2, 1.0, (10.0, -2.0, 1.0))
        self.assertEqual(voxel_to_world(VoxelIndex(2, 2, 1), grid), WorldPoint(10.0, -2.0, 1.0))

    def test_out_of_bounds_index(self):
        grid = GridSpec(200, 200, 16, 0.4)
        with self.assertRaises(BoundsError):
            voxel_to_world(VoxelIndex(200, 0, 0), grid)
        with self.assertRaises(BoundsError):
            voxel_to_world(VoxelIndex(0, -1, 0), grid)

    def test_round_trip_is_exact_on_every_index(self):
        grid = GridSpec(200, 200, 16, 0.4)
        coords = world_to_voxel_array(voxel_centers_world(grid), grid)
        j, i, k = np.meshgrid(np.arange(200), np.arange(200), np.arange(16), indexing="ij")
        self.assertTrue(np.array_equal(coords[..., 0], i))
        self.assertTrue(np.array_equal(coords[..., 1], j))
        self.assertTrue(np.array_equal(coords[..., 2], k))

    def test_scalar_and_array_paths_agree(self):
        grid = GridSpec(6, 8, 4, 0.5, (1.0, 2.0, 0.0))
        centers = voxel_centers_world(grid)
        for idx in [VoxelIndex(0, 0, 0), VoxelIndex(7, 5, 3), VoxelIndex(3, 2, 1)]:
            p = voxel_to_world(idx, grid)
            self.assertTrue(np.allclose(centers[idx.j, idx.i, idx.k], p, atol=1e-12))
            self.assertEqual(world_to_voxel(p, grid), (idx.i, idx.j, idx.k))

    def test_continuous_coordinates_between_centers(self):
        grid = GridSpec(4, 4, 4, 1.0)
        c = world_to_voxel(WorldPoint(0.5, -0.25, 0.0), grid)
        self.assertAlmostEqual(c.u, 2.5)
        self.assertAlmostEqual(c.v, 1.75)
        self.assertAlmostEqual(c.w, 2.0)


class TestSightRays(unittest.TestCase):
    def test_direction_is_unit(self):
        grid = GridSpec(8, 8, 4, 0.5)
        d = sight_direction(WorldPoint(3.0, 4.0, 0.0), grid)
        self.assertAlmostEqual(d.dx, 0.6)
        self.assertAlmostEqual(d.dy, 0.8)
        self.assertAlmostEqual(d.dz, 0.0)

    def test_center_has_zero_direction(self):
        grid = GridSpec(8, 8, 4, 0.5)
        self.assertEqual(sight_direction(WorldPoint(0.0, 0.0, 0.0), grid), ZERO_DIRECTION)
        self.assertTrue(sight_direction(WorldPoint(1e-12, 0.0, 0.0), grid).is_zero)

    def test_samples_along_ray(self):
        grid = GridSpec(8, 8, 4, 0.5)
        p = WorldPoint(1.0, 0.0, 0.0)
        points = sample_sight_points(p, sight_direction(p, grid), StrideSet((-1, 0, 2)), grid)
        self.assertEqual(len(points), 3)
        self.assertAlmostEqual(points[0].x, 0.5)
        self.assertEqual(points[1], p)
        self.assertAlmostEqual(points[2].x, 2.0)

    def test_zero_direction_repeats_point(self):
        grid = GridSpec(8, 8, 4, 0.5)
        p = WorldPoint(0.0, 0.0, 0.0)
        points = sample_sight_points(p, ZERO_DIRECTION, StrideSet(), grid)
        self.assertEqual(len(points), 9)
        self.assertTrue(all(q == p for q in points))

    def test_stride_set_validation(self):
        with self.assertRaises(ConfigError):
            StrideSet(())
        with self.assertRaises(ConfigError):
            StrideSet((1, 2))
        with self.assertRaises(ConfigError):
            StrideSet((0, -1))
        self.assertEqual(StrideSet((-2, 0, 3)).zero_slot, 1)


class TestPoses(unittest.TestCase):
    def test_rejects_non_rigid_matrix(self):
        scaled = np.eye(4)
        scaled[0, 0] = 2.0
        with self.assertRaises(InvalidPoseError):
            FramePose(scaled, 0.0)

    def test_rejects_reflection_and_bad_last_row(self):
        reflection = np.diag([1.0, 1.0, -1.0, 1.0])
        with self.assertRaises(InvalidPoseError):
            FramePose(reflection, 0.0)
        bad_row = np.eye(4)
        bad_row[3, 0] = 1.0
        with self.assertRaises(InvalidPoseError):
            FramePose(bad_row, 0.0)
        with self.assertRaises(InvalidPoseError):
            FramePose(np.eye(3), 0.0)

    def test_identity_poses_give_identity(self):
        pose = FramePose(np.eye(4), 0.0)
        m = relative_transform(pose, FramePose(np.eye(4), -0.5))
        self.assertTrue(np.allclose(m, np.eye(4), atol=1e-9))
        p = WorldPoint(1.5, -2.0, 0.25)
        q = transform_point(m, p)
        self.assertTrue(np.allclose(q, p, atol=1e-9))

    def test_forward_motion_moves_points_ahead_in_past_frame(self):
        now = FramePose.from_translation_yaw(2.0, 0.0, 0.0, 0.0, 1.0)
        past = FramePose.from_translation_yaw(0.0, 0.0, 0.0, 0.0, 0.5)
        q = transform_point(relative_transform(now, past), WorldPoint(1.0, 0.0, 0.0))
        self.assertTrue(np.allclose(q, (3.0, 0.0, 0.0), atol=1e-12))

    def test_yaw_convention(self):
        pose = FramePose.from_translation_yaw(0.0, 0.0, 0.0, math.pi / 2, 0.0)
        q = transform_point(pose.transform, WorldPoint(1.0, 0.0, 0.0))
        self.assertTrue(np.allclose(q, (0.0, 1.0, 0.0), atol=1e-12))

    def test_rigid_transform_preserves_distances(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x, y, z = rng.uniform(-10, 10, 3)
            now = FramePose.from_translation_yaw(x, y, z, rng.uniform(-np.pi, np.pi), 1.0)
            past = FramePose.from_translation_yaw(
                *rng.uniform(-10, 10, 3), rng.uniform(-np.pi, np.pi), 0.5
            )
            m = relative_transform(now, past)
            a, b = rng.uniform(-20, 20, (2, 3))
            before = np.linalg.norm(a - b)
            after = np.linalg.norm(transform_points(m, a) - transform_points(m, b))
            self.assertLessEqual(abs(after - before), 1e-9 * max(before, 1.0))

    def test_composition_of_transforms(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a, b = random_rigid(rng), random_rigid(rng)
            p = WorldPoint(*rng.uniform(-10, 10, 3))
            composed = transform_point(a @ b, p)
            chained = transform_point(a, transform_point(b, p))
            self.assertTrue(np.allclose(composed, chained, rtol=0.0, atol=1e-9))

    def test_projected_sight_samples_leave_the_past_sight_ray(self):
        grid = GridSpec(8, 8, 4, 0.5)
        now = FramePose.from_translation_yaw(2.0, 0.5, 0.0, 0.3, 1.0)
        past = FramePose.from_translation_yaw(0.0, 0.0, 0.0, 0.0, 0.5)
        m = relative_transform(now, past)
        p = WorldPoint(2.0, 1.0, 0.5)
        samples = sample_sight_points(p, sight_direction(p, grid), StrideSet(), grid)
        center = np.array(transform_point(m, p))
        past_ray = np.array(sight_direction(WorldPoint(*center), grid))
        angles = []
        for q in samples:
            offset = np.array(transform_point(m, q)) - center
            if np.linalg.norm(offset) > 0:
                cosine = abs(offset @ past_ray) / np.linalg.norm(offset)
                angles.append(math.acos(min(cosine, 1.0)))
        self.assertEqual(len(angles), 8)
        self.assertGreater(min(angles), 1e-3)


if __name__ == "__main__":
    unittest.main()
