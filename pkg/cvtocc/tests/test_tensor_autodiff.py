import unittest

import numpy as np

from cvtocc.errors import NonFiniteError, ShapeError, UsageError
from cvtocc.grid_geometry import ContinuousVoxelCoord
from cvtocc.tensor_autodiff import (
    DenseTensor,
    ParamTensor,
    Tape,
    backward,
    conv3d,
    elementwise_mul,
    relu,
    reshape,
    sample_volume,
    sigmoid,
    sum_all,
    trilinear_sample,
    weighted_sum,
)
from cvtocc.tests.helpers import assert_gradients_match, reference_conv3d


def tracked(values: np.ndarray) -> DenseTensor:
    return DenseTensor(np.array(values, dtype=np.float64), requires_grad=True)


class TestTape(unittest.TestCase):
    def test_backward_on_empty_tape(self):
        with self.assertRaises(UsageError):
            backward(Tape(), DenseTensor(np.array(1.0)))

    def test_untracked_inputs_record_nothing(self):
        tape = Tape()
        relu(DenseTensor(np.ones(3)), tape)
        self.assertEqual(len(tape), 0)

    def test_non_finite_forward_raises(self):
        with self.assertRaises(NonFiniteError):
            relu(DenseTensor(np.array([1.0, np.nan])))

    def test_gradient_accumulates_over_two_uses(self):
        x = tracked([1.0, -2.0, 3.0])
        tape = Tape()
        loss = weighted_sum(sum_all(x, tape), sum_all(x, tape), 2.0, tape)
        backward(tape, loss)
        self.assertTrue(np.allclose(x.grad, 3.0))

    def test_param_grad_is_always_allocated(self):
        p = ParamTensor("w", np.zeros((2, 2)))
        self.assertTrue(np.array_equal(p.grad, np.zeros((2, 2))))
        p.grad += 1.0
        p.zero_grad()
        self.assertTrue(np.array_equal(p.grad, np.zeros((2, 2))))


class TestOps(unittest.TestCase):
    def test_sigmoid_values(self):
        s = sigmoid(DenseTensor(np.array([0.0, np.log(3.0)]))).values
        self.assertAlmostEqual(s[0], 0.5)
        self.assertAlmostEqual(s[1], 0.75)

    def test_sigmoid_stays_inside_open_interval_when_saturated(self):
        for dtype in (np.float32, np.float64):
            s = sigmoid(DenseTensor(np.array([-1000.0, 1000.0], dtype=dtype))).values
            self.assertTrue(np.all(s > 0))
            self.assertTrue(np.all(s < 1))

    def test_elementwise_mul_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            elementwise_mul(DenseTensor(np.ones((2, 2, 2, 3))), DenseTensor(np.ones((2, 2))))

    def test_weighted_sum_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            weighted_sum(DenseTensor(np.ones(2)), DenseTensor(np.ones(3)), 1.0)

    def test_conv3d_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(3, 4, 2, 2))
        kernel = np.zeros((3, 3, 3, 2, 2))
        kernel[1, 1, 1] = np.eye(2)
        out = conv3d(DenseTensor(x), DenseTensor(kernel), DenseTensor(np.zeros(2))).values
        self.assertTrue(np.allclose(out, x))

    def test_conv3d_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 3, 3, 2))
        kernel = rng.normal(size=(3, 3, 3, 2, 1))
        bias = np.array([0.5])
        out = conv3d(DenseTensor(x), DenseTensor(kernel), DenseTensor(bias)).values
        padded = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
        expected = bias[0] + sum(
            padded[a, b, c] @ kernel[a, b, c, :, 0]
            for a in range(3)
            for b in range(3)
            for c in range(3)
        )
        self.assertAlmostEqual(out[0, 0, 0, 0], expected)

    def test_conv3d_matches_nested_loops(self):
        rng = np.random.default_rng(2)
        for h, w, z, cin, cout, k in [
            (5, 5, 4, 2, 3, 3),
            (7, 7, 5, 2, 2, 3),
            (4, 3, 5, 1, 2, 5),
            (3, 4, 2, 3, 2, 1),
        ]:
            x = rng.normal(size=(h, w, z, cin))
            kernel = rng.normal(size=(k, k, k, cin, cout))
            bias = rng.normal(size=(cout,))
            out = conv3d(DenseTensor(x), DenseTensor(kernel), DenseTensor(bias)).values
            self.assertTrue(np.allclose(out, reference_conv3d(x, kernel, bias), atol=1e-5))

    def test_conv3d_shape_errors(self):
        x = DenseTensor(np.ones((2, 2, 2, 3)))
        with self.assertRaises(ShapeError):
            conv3d(x, DenseTensor(np.ones((3, 3, 3, 2, 1))), DenseTensor(np.ones(1)))
        with self.assertRaises(ShapeError):
            conv3d(x, DenseTensor(np.ones((2, 2, 2, 3, 1))), DenseTensor(np.ones(1)))
        with self.assertRaises(ShapeError):
            conv3d(x, DenseTensor(np.ones((3, 3, 3, 3, 1))), DenseTensor(np.ones(2)))


class TestGradients(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_sigmoid(self):
        x = tracked(self.rng.normal(size=(2, 3)))
        assert_gradients_match(self, lambda tape: sum_all(sigmoid(x, tape), tape), [x])

    def test_relu(self):
        x = tracked(self.rng.normal(size=(4, 3)) + 0.05)
        assert_gradients_match(self, lambda tape: sum_all(relu(x, tape), tape), [x])

    def test_elementwise_mul(self):
        a = tracked(self.rng.normal(size=(2, 2, 2, 3)))
        w = tracked(self.rng.uniform(0.1, 0.9, size=(2, 2, 2)))
        c = self.rng.normal(size=(2, 2, 2, 3))

        def forward(tape):
            return sum_all(elementwise_mul(DenseTensor(c), elementwise_mul(a, w, tape), tape), tape)

        assert_gradients_match(self, forward, [a, w])

    def test_weighted_sum_and_reshape(self):
        a = tracked(self.rng.normal(size=(6,)))
        b = tracked(self.rng.normal(size=(2, 3)))
        c = self.rng.normal(size=(2, 3))

        def forward(tape):
            summed = weighted_sum(reshape(a, (2, 3), tape), b, 0.3, tape)
            return sum_all(elementwise_mul(DenseTensor(c), summed, tape), tape)

        assert_gradients_match(self, forward, [a, b])

    def test_conv3d(self):
        x = tracked(self.rng.normal(size=(3, 2, 2, 2)))
        kernel = tracked(self.rng.normal(size=(3, 3, 3, 2, 2)))
        bias = tracked(self.rng.normal(size=(2,)))
        c = self.rng.normal(size=(3, 2, 2, 2))

        def forward(tape):
            out = conv3d(x, kernel, bias, tape)
            return sum_all(elementwise_mul(DenseTensor(c), out, tape), tape)

        assert_gradients_match(self, forward, [x, kernel, bias])

    def test_conv3d_channel_change(self):
        x = tracked(self.rng.normal(size=(3, 4, 2, 2)))
        kernel = tracked(self.rng.normal(size=(3, 3, 3, 2, 3)))
        bias = tracked(self.rng.normal(size=(3,)))
        c = self.rng.normal(size=(3, 4, 2, 3))

        def forward(tape):
            out = conv3d(x, kernel, bias, tape)
            return sum_all(elementwise_mul(DenseTensor(c), out, tape), tape)

        assert_gradients_match(self, forward, [x, kernel, bias])

    def test_conv_relu_conv_sigmoid_chain(self):
        x = self.rng.normal(size=(2, 3, 2, 2))
        k1 = tracked(self.rng.normal(size=(3, 3, 3, 2, 3)) * 0.5)
        b1 = tracked(self.rng.normal(size=(3,)))
        k2 = tracked(self.rng.normal(size=(1, 1, 1, 3, 1)))
        b2 = tracked(self.rng.normal(size=(1,)))

        def forward(tape):
            hidden = relu(conv3d(DenseTensor(x), k1, b1, tape), tape)
            return sum_all(sigmoid(conv3d(hidden, k2, b2, tape), tape), tape)

        assert_gradients_match(self, forward, [k1, b1, k2, b2])


class TestSampling(unittest.TestCase):
    def setUp(self):
        self.volume = np.arange(2 * 3 * 2 * 1, dtype=np.float64).reshape(2, 3, 2, 1)

    def test_integer_coordinates_hit_cells(self):
        values, valid = sample_volume(self.volume, np.array([[2.0, 1.0, 1.0], [0.0, 0.0, 0.0]]))
        self.assertTrue(np.all(valid))
        self.assertEqual(values[0, 0], self.volume[1, 2, 1, 0])
        self.assertEqual(values[1, 0], self.volume[0, 0, 0, 0])

    def test_midpoint_is_average(self):
        values, _ = sample_volume(self.volume, np.array([0.5, 0.5, 0.5]))
        self.assertAlmostEqual(values[0], self.volume[0:2, 0:2, 0:2, 0].mean())

    def test_out_of_range_gives_zero_and_invalid(self):
        values, valid = sample_volume(self.volume, np.array([[3.5, 0.0, 0.0], [0.0, -0.1, 0.0]]))
        self.assertFalse(np.any(valid))
        self.assertTrue(np.all(values == 0))

    def test_bilinear_uses_nearest_slice(self):
        values, valid = sample_volume(self.volume, np.array([1.0, 1.0, 0.8]), "bilinear")
        self.assertTrue(valid)
        self.assertEqual(values[0], self.volume[1, 1, 1, 0])

    def test_single_cell_axis(self):
        volume = np.full((1, 1, 1, 2), 4.0)
        values, valid = sample_volume(volume, np.array([0.0, 0.0, 0.0]))
        self.assertTrue(valid)
        self.assertTrue(np.array_equal(values, [4.0, 4.0]))

    def test_linear_field_is_reproduced(self):
        v, u, w = np.meshgrid(np.arange(5.0), np.arange(4.0), np.arange(3.0), indexing="ij")
        volume = (2 * u + 3 * v + 5 * w)[..., None]
        features, valid = trilinear_sample(DenseTensor(volume), ContinuousVoxelCoord(1.5, 2.25, 0.5))
        self.assertTrue(valid)
        self.assertAlmostEqual(features[0], 12.25, delta=1e-5)

    def test_affine_fields_are_reproduced_everywhere(self):
        rng = np.random.default_rng(3)
        v, u, w = np.meshgrid(np.arange(6.0), np.arange(5.0), np.arange(4.0), indexing="ij")
        slopes = rng.normal(size=(3, 2))
        offsets = rng.normal(size=2)
        volume = u[..., None] * slopes[0] + v[..., None] * slopes[1] + w[..., None] * slopes[2]
        volume = volume + offsets
        coords = rng.uniform(0.0, 1.0, size=(1000, 3)) * [4.0, 5.0, 3.0]
        values, valid = sample_volume(volume, coords)
        self.assertTrue(np.all(valid))
        self.assertTrue(np.allclose(values, coords @ slopes + offsets, atol=1e-5))

    def test_trilinear_sample_scalar_form(self):
        features, valid = trilinear_sample(DenseTensor(self.volume), ContinuousVoxelCoord(1.0, 0.5, 0.0))
        self.assertTrue(valid)
        self.assertAlmostEqual(features[0], (self.volume[0, 1, 0, 0] + self.volume[1, 1, 0, 0]) / 2)


if __name__ == "__main__":
    unittest.main()
