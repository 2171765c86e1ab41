"""Shared fixtures for the test suites: finite-difference gradients, a loop convolution and a
tiny run config."""

from typing import Any, Callable, Optional

import numpy as np
from toolz import merge  # type: ignore

from cvtocc.constants import DEFAULT_CONFIG
from cvtocc.tensor_autodiff import DenseTensor, Tape, backward

TINY_CONFIG: dict[str, Any] = merge(
    DEFAULT_CONFIG,
    {
        "grid_height": 8,
        "grid_width": 8,
        "grid_depth": 4,
        "voxel_size": 1.0,
        "feature_channels": 3,
        "class_names": ["free", "road", "vehicle"],
        "ground_class": 1,
        "ground_height": -1.5,
        "box_count_min": 1,
        "box_count_max": 2,
        "box_size_min": 1.5,
        "box_size_max": 2.5,
        "frame_count": 2,
        "strides": [-1, 0, 1],
        "train_samples": 3,
        "eval_samples": 2,
        "epochs": 2,
        "hidden_width": 4,
    },
)


def numeric_gradient(
    loss: Callable[[], float], tensor: DenseTensor, eps: float = 1e-6
) -> np.ndarray:
    """Central finite differences of a scalar function of `tensor`'s values."""
    grad = np.zeros_like(tensor.values, dtype=np.float64)
    values = tensor.values
    for idx in np.ndindex(values.shape):
        original = values[idx]
        values[idx] = original + eps
        plus = loss()
        values[idx] = original - eps
        minus = loss()
        values[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def analytic_gradients(
    forward: Callable[[Optional[Tape]], DenseTensor], tensors: list[DenseTensor]
) -> list[np.ndarray]:
    """Gradients of forward(tape) with respect to each tensor, by backward()."""
    for t in tensors:
        t.zero_grad()
    tape = Tape()
    backward(tape, forward(tape))
    return [t.grad.copy() for t in tensors]


def assert_gradients_match(
    case: Any,
    forward: Callable[[Optional[Tape]], DenseTensor],
    tensors: list[DenseTensor],
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> None:
    analytic = analytic_gradients(forward, tensors)
    for tensor, grad in zip(tensors, analytic):
        numeric = numeric_gradient(lambda: forward(None).item(), tensor)
        case.assertTrue(
            np.allclose(grad, numeric, rtol=rtol, atol=atol),
            f"gradient mismatch for {tensor!r}: max abs diff {np.max(np.abs(grad - numeric))}",
        )


def reference_conv3d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' correlation, one output element at a time."""
    h, w, z, cin = x.shape
    k, cout = kernel.shape[0], kernel.shape[4]
    pad = k // 2
    out = np.zeros((h, w, z, cout))
    for p, q, r, o in np.ndindex(h, w, z, cout):
        total = float(bias[o])
        for a, b, c, i in np.ndindex(k, k, k, cin):
            pa, qb, rc = p + a - pad, q + b - pad, r + c - pad
            if 0 <= pa < h and 0 <= qb < w and 0 <= rc < z:
                total += x[pa, qb, rc, i] * kernel[a, b, c, i, o]
        out[p, q, r, o] = total
    return out
