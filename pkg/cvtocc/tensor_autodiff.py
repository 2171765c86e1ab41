"""
A small reverse-mode differentiation engine over numpy arrays.

Only the operations the refinement head, the decoder and the losses need are provided:
3D convolution, rectifier, sigmoid, per-voxel weighting, sums and the weighted sum of two
scalars. Volume sampling (trilinear and per-slice bilinear) lives here too; it is not
differentiated because volume features are inputs.

Each differentiable op takes an optional Tape. When a tape is given and any input requires a
gradient, the op records a closure that maps the output gradient onto input gradients.
backward() replays the tape in reverse and accumulates into every `grad` buffer.

Precision follows the inputs: float32 for training, float64 for gradient checks.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cvtocc.errors import NonFiniteError, ShapeError, UsageError
from cvtocc.grid_geometry import ContinuousVoxelCoord

GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

INTERPOLATION_MODES = ("trilinear", "bilinear")


class DenseTensor:
    """
    A dense row-major array, optionally tracked for gradients.

    Attributes:
        values (np.ndarray): the data.
        grad (Optional[np.ndarray]): gradient buffer, allocated on first accumulation.
        requires_grad (bool): whether gradients flow into this tensor.
    """

    def __init__(self, values: np.ndarray, requires_grad: bool = False):
        self.values: np.ndarray = np.asarray(values)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += grad.reshape(self.values.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape}, dtype={self.dtype})"


class ParamTensor(DenseTensor):
    """A trainable tensor with a stable name and an always-allocated gradient buffer."""

    def __init__(self, name: str, values: np.ndarray):
        super().__init__(values, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.values)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[DenseTensor, ...]
    output: DenseTensor
    grad_fn: GradFn


@dataclass
class Tape:
    """Ordered record of executed differentiable ops."""

    entries: list[TapeEntry] = field(default_factory=list)

    def record(
        self,
        op: str,
        inputs: Sequence[DenseTensor],
        output: DenseTensor,
        grad_fn: GradFn,
    ) -> None:
        self.entries.append(TapeEntry(op, tuple(inputs), output, grad_fn))

    def __len__(self) -> int:
        return len(self.entries)


def _finite(values: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return values


def make_output(
    op: str,
    values: np.ndarray,
    inputs: Sequence[DenseTensor],
    tape: Optional[Tape],
    grad_fn: GradFn,
) -> DenseTensor:
    """
    Wrap the result of a forward computation and record it on the tape when needed.

    Exceptions:
        NonFiniteError: if `values` holds NaN or infinity.
    """
    requires_grad = any(t.requires_grad for t in inputs)
    out = DenseTensor(_finite(values, op), requires_grad=requires_grad)
    if tape is not None and requires_grad:
        tape.record(op, inputs, out, grad_fn)
    return out


def backward(tape: Tape, loss: DenseTensor) -> None:
    """
    Propagate d(loss)/d(.) through the tape into every gradient buffer.

    Args:
        tape (Tape): the tape the loss was computed on.
        loss (DenseTensor): a single-element tensor produced by taped ops.

    Side effects:
        - Accumulates into the `grad` buffers of all tensors on the tape.

    Exceptions:
        UsageError: if the tape is empty or the loss is not a scalar.
    """
    if len(tape) == 0:
        raise UsageError("backward() called on an empty tape")
    if loss.values.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.values))

    for entry in reversed(tape.entries):
        if entry.output.grad is None:
            continue
        input_grads = entry.grad_fn(entry.output.grad)
        for tensor, grad in zip(entry.inputs, input_grads):
            if grad is not None and tensor.requires_grad:
                tensor.accumulate_grad(grad)


# Differentiable ops


def sigmoid(x: DenseTensor, tape: Optional[Tape] = None) -> DenseTensor:
    """
    Elementwise 1 / (1 + e^-x).

    Outputs are clamped to the open interval (0, 1) of the working dtype, so they stay strictly
    inside it even where the exact value rounds to 0 or 1.
    """
    v = x.values
    info = np.finfo(v.dtype)
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)
    s = np.clip(s, info.tiny, 1.0 - info.epsneg)

    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g * s * (1.0 - s),)

    return make_output("sigmoid", s, [x], tape, grad_fn)


def relu(x: DenseTensor, tape: Optional[Tape] = None) -> DenseTensor:
    v = x.values
    positive = v > 0

    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g * positive,)

    # Multiplying keeps NaN and infinity in the output, where make_output rejects them.
    return make_output("relu", (v * positive).astype(v.dtype), [x], tape, grad_fn)


def elementwise_mul(
    a: DenseTensor, w: DenseTensor, tape: Optional[Tape] = None
) -> DenseTensor:
    """
    Multiply every channel of a voxel by that voxel's scalar weight.

    Args:
        a (DenseTensor): features of shape [..., C].
        w (DenseTensor): weights of shape [...] or [..., 1].

    Exceptions:
        ShapeError: if w does not match a's leading axes.
    """
    av = a.values
    wv = w.values
    if wv.shape == av.shape[:-1]:
        weights = wv[..., None]
    elif wv.shape == av.shape[:-1] + (1,) or wv.shape == av.shape:
        weights = wv
    else:
        raise ShapeError(f"Cannot weight features {av.shape} by {wv.shape}")

    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        grad_a = g * weights
        grad_w = g * av
        if weights.shape != av.shape:
            grad_w = grad_w.sum(axis=-1, keepdims=True)
        return (grad_a, grad_w.reshape(wv.shape))

    return make_output("elementwise_mul", av * weights, [a, w], tape, grad_fn)


def sum_all(x: DenseTensor, tape: Optional[Tape] = None) -> DenseTensor:
    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.broadcast_to(g.reshape(()), x.shape).copy(),)

    return make_output("sum_all", np.asarray(x.values.sum()), [x], tape, grad_fn)


def weighted_sum(
    a: DenseTensor, b: DenseTensor, weight: float, tape: Optional[Tape] = None
) -> DenseTensor:
    """a + weight * b for tensors of equal shape."""
    if a.shape != b.shape:
        raise ShapeError(f"Cannot add {a.shape} and {b.shape}")

    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g, g * weight)

    return make_output("weighted_sum", a.values + weight * b.values, [a, b], tape, grad_fn)


def conv3d(
    x: DenseTensor,
    kernel: DenseTensor,
    bias: DenseTensor,
    tape: Optional[Tape] = None,
) -> DenseTensor:
    """
    Same-size 3D cross-correlation with zero padding (k - 1) / 2 and stride 1.

    Args:
        x (DenseTensor): input of shape [H, W, Z, Cin].
        kernel (DenseTensor): weights of shape [k, k, k, Cin, Cout], k odd.
        bias (DenseTensor): shape [Cout].

    Exceptions:
        ShapeError: on a rank, kernel size or channel mismatch.

    Returns:
        DenseTensor: output of shape [H, W, Z, Cout].
    """
    xv, kv, bv = x.values, kernel.values, bias.values
    if xv.ndim != 4 or kv.ndim != 5:
        raise ShapeError(f"conv3d expects ranks 4 and 5, got {xv.ndim} and {kv.ndim}")
    k = kv.shape[0]
    if kv.shape[:3] != (k, k, k) or k % 2 == 0:
        raise ShapeError(f"conv3d needs a cubic kernel of odd size, got {kv.shape[:3]}")
    if kv.shape[3] != xv.shape[3]:
        raise ShapeError(
            f"conv3d channel mismatch: input has {xv.shape[3]}, kernel expects {kv.shape[3]}"
        )
    if bv.shape != (kv.shape[4],):
        raise ShapeError(f"conv3d bias shape {bv.shape} does not match {kv.shape[4]} outputs")

    h, w, z, cin = xv.shape
    cout = kv.shape[4]
    pad = (k - 1) // 2
    spatial = ((pad, pad), (pad, pad), (pad, pad))
    x_flat = xv.reshape(-1, cin)
    # [Cin, (a, b, c, Cout)]: every kernel offset in one matrix product.
    k_flat = kv.transpose(3, 0, 1, 2, 4).reshape(cin, -1)

    # responses[p, a, b, c] = x[p] . kernel[a, b, c]; output p gathers the response of
    # its neighbor p + (a, b, c) - pad.
    responses = (x_flat @ k_flat).reshape(h, w, z, k, k, k, cout)
    padded = np.pad(responses, spatial + ((0, 0),) * 4)
    out = np.zeros((h, w, z, cout), dtype=responses.dtype)
    for a, b, c in np.ndindex(k, k, k):
        out += padded[a : a + h, b : b + w, c : c + z, a, b, c]
    out += bv

    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        # shifted[q, a, b, c] = g[q - (a, b, c) + pad], zero outside the grid.
        windows = sliding_window_view(np.pad(g, spatial + ((0, 0),)), (k, k, k), axis=(0, 1, 2))
        shifted = windows[..., ::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 5, 6, 3)
        shifted = shifted.reshape(h * w * z, -1)
        grad_kernel = (x_flat.T @ shifted).reshape(cin, k, k, k, cout).transpose(1, 2, 3, 0, 4)
        grad_x = None
        if x.requires_grad:
            grad_x = (shifted @ k_flat.T).reshape(xv.shape)
        return (grad_x, grad_kernel, g.reshape(-1, cout).sum(axis=0))

    return make_output("conv3d", out, [x, kernel, bias], tape, grad_fn)


# Volume sampling


def _axis_corners(coord: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower corner, upper corner and fractional weight along one axis, for in-range coords."""
    if size == 1:
        zeros = np.zeros(coord.shape, dtype=np.int64)
        return zeros, zeros, np.zeros(coord.shape)
    lower = np.clip(np.floor(coord), 0, size - 2).astype(np.int64)
    return lower, lower + 1, coord - lower


def sample_volume(
    volume: np.ndarray, coords: np.ndarray, mode: str = "trilinear"
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sample a [H, W, Z, C] volume at continuous (u, v, w) coordinates.

    Coordinates outside [0, W-1] x [0, H-1] x [0, Z-1] give the zero vector and valid=False.
    In "trilinear" mode the 8 surrounding cell centers are blended; in "bilinear" mode w is
    rounded to the nearest z slice and the 4 surrounding cell centers of that slice blended.

    Args:
        volume (np.ndarray): features laid out [j, i, k, c].
        coords (np.ndarray): shape [..., 3] holding (u, v, w).
        mode (str): "trilinear" or "bilinear".

    Returns:
        Tuple[np.ndarray, np.ndarray]: features [..., C] and validity flags [...].
    """
    assert volume.ndim == 4, "volume must have rank 4"
    assert mode in INTERPOLATION_MODES, f"unknown interpolation mode {mode}"
    height, width, depth, channels = volume.shape
    u, v, w = coords[..., 0], coords[..., 1], coords[..., 2]
    valid = (
        np.isfinite(coords).all(axis=-1)
        & (u >= 0) & (u <= width - 1)
        & (v >= 0) & (v <= height - 1)
        & (w >= 0) & (w <= depth - 1)
    )
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    w = np.where(valid, w, 0.0)

    i0, i1, fu = _axis_corners(u, width)
    j0, j1, fv = _axis_corners(v, height)
    if mode == "trilinear":
        k0, k1, fw = _axis_corners(w, depth)
    else:
        k0 = np.floor(w + 0.5).astype(np.int64)
        k1, fw = k0, np.zeros(w.shape)

    fu, fv, fw = fu[..., None], fv[..., None], fw[..., None]
    result = (
        (1 - fu) * (1 - fv) * (1 - fw) * volume[j0, i0, k0]
        + fu * (1 - fv) * (1 - fw) * volume[j0, i1, k0]
        + (1 - fu) * fv * (1 - fw) * volume[j1, i0, k0]
        + fu * fv * (1 - fw) * volume[j1, i1, k0]
        + (1 - fu) * (1 - fv) * fw * volume[j0, i0, k1]
        + fu * (1 - fv) * fw * volume[j0, i1, k1]
        + (1 - fu) * fv * fw * volume[j1, i0, k1]
        + fu * fv * fw * volume[j1, i1, k1]
    )
    result = np.where(valid[..., None], result, 0.0).astype(volume.dtype)
    return result, valid


def trilinear_sample(
    volume: DenseTensor, coord: ContinuousVoxelCoord
) -> Tuple[np.ndarray, bool]:
    """
    Trilinear blend of the 8 cell-center features around one coordinate.

    Returns:
        Tuple[np.ndarray, bool]: the feature vector [C] and whether the coordinate was in range.
    """
    assert len(volume.shape) == 4, "volume must have rank 4"
    features, valid = sample_volume(
        volume.values, np.array(coord, dtype=np.float64), "trilinear"
    )
    return features, bool(valid)


def reshape(
    x: DenseTensor, shape: Tuple[int, ...], tape: Optional[Tape] = None
) -> DenseTensor:
    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g.reshape(x.shape),)

    return make_output("reshape", x.values.reshape(shape), [x], tape, grad_fn)
