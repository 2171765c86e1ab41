"""
Occupancy decoding and the training losses.

The decoder maps refined volume features to M+1 class scores per voxel (Free included as
class 0). The occupancy loss is a class-weighted softmax cross-entropy, the CVT loss a binary
cross-entropy on the refinement weights; both are averaged over visible voxels so the
balance factor lambda does not depend on grid size.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from cvtocc.cost_volume import RefinedVolume
from cvtocc.errors import ConfigError, DomainError, ShapeError
from cvtocc.tensor_autodiff import (
    DenseTensor,
    ParamTensor,
    Tape,
    conv3d,
    make_output,
    relu,
    weighted_sum,
)

FREE_CLASS = 0


@dataclass(frozen=True)
class ClassSet:
    """
    Semantic classes c_0..c_M, with c_0 = Free.

    Attributes:
        names (Tuple[str, ...]): M+1 class names, Free first.
        frequencies (Tuple[int, ...]): per-class voxel counts of the training split, or empty.
    """

    names: Tuple[str, ...]
    frequencies: Tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "frequencies", tuple(int(f) for f in self.frequencies))
        if len(self.names) < 2:
            raise ConfigError("A class set needs Free plus at least one semantic class")
        if self.frequencies and len(self.frequencies) != len(self.names):
            raise ConfigError("Class frequencies must cover every class")
        if any(f < 0 for f in self.frequencies):
            raise ConfigError("Class frequencies must be nonnegative")

    @property
    def num_semantic(self) -> int:
        """M, the number of non-Free classes."""
        return len(self.names) - 1

    @property
    def num_outputs(self) -> int:
        """M + 1, the number of logit channels."""
        return len(self.names)


class OccupancyGrid(NamedTuple):
    """Integer labels [H, W, Z] with values in [0, M]."""

    labels: np.ndarray


class VisibilityMask(NamedTuple):
    """Boolean grid [H, W, Z]; only True voxels are supervised and evaluated."""

    mask: np.ndarray


class LossValue(NamedTuple):
    """A scalar loss and whether it was computed over an empty mask (then it is 0)."""

    loss: DenseTensor
    empty_mask: bool


@dataclass
class DecoderParams:
    """A 3x3x3 convolution C -> C with a rectifier, then a per-voxel linear map C -> M+1."""

    conv_kernel: ParamTensor
    conv_bias: ParamTensor
    linear_kernel: ParamTensor
    linear_bias: ParamTensor

    @staticmethod
    def initialise(
        channels: int,
        num_outputs: int,
        rng: np.random.Generator,
        dtype: type = np.float32,
    ) -> "DecoderParams":
        bound_conv = 1.0 / np.sqrt(27 * channels)
        bound_linear = 1.0 / np.sqrt(channels)
        return DecoderParams(
            ParamTensor(
                "decoder.conv.kernel",
                rng.uniform(-bound_conv, bound_conv, (3, 3, 3, channels, channels)).astype(dtype),
            ),
            ParamTensor(
                "decoder.conv.bias",
                rng.uniform(-bound_conv, bound_conv, channels).astype(dtype),
            ),
            ParamTensor(
                "decoder.linear.kernel",
                rng.uniform(
                    -bound_linear, bound_linear, (1, 1, 1, channels, num_outputs)
                ).astype(dtype),
            ),
            ParamTensor(
                "decoder.linear.bias",
                rng.uniform(-bound_linear, bound_linear, num_outputs).astype(dtype),
            ),
        )

    def parameters(self) -> list[ParamTensor]:
        return [self.conv_kernel, self.conv_bias, self.linear_kernel, self.linear_bias]


def decode(
    refined: RefinedVolume, params: DecoderParams, tape: Optional[Tape] = None
) -> DenseTensor:
    """
    Class logits [H, W, Z, M+1] from the refined volume.

    Exceptions:
        ShapeError: if the parameters do not fit the feature channels.
    """
    hidden = relu(
        conv3d(refined.v_occ, params.conv_kernel, params.conv_bias, tape), tape
    )
    return conv3d(hidden, params.linear_kernel, params.linear_bias, tape)


def predict(logits: DenseTensor) -> OccupancyGrid:
    """Argmax labels; ties go to the lowest class index."""
    return OccupancyGrid(np.argmax(logits.values, axis=-1).astype(np.uint8))


def class_weights(frequencies: Sequence[int]) -> np.ndarray:
    """
    Weights inversely proportional to class frequency, normalised to mean 1.

    w_c = total / (M+1) / freq_c for classes with a positive count; classes with a zero count
    receive the largest of those weights.

    Exceptions:
        ConfigError: if every count is zero.
    """
    counts = np.asarray(frequencies, dtype=np.float64)
    present = counts > 0
    if not present.any():
        raise ConfigError("Class weights need at least one class with a positive count")
    raw = counts.sum() / len(counts) / np.maximum(counts, 1.0)
    raw = np.where(present, raw, raw[present].max())
    return raw / raw.mean()


def _check_shapes(grid_shape: Tuple[int, ...], *arrays: np.ndarray) -> None:
    for array in arrays:
        if array.shape != grid_shape:
            raise ShapeError(f"Expected a grid of shape {grid_shape}, got {array.shape}")


def _empty_loss(
    source: DenseTensor, tape: Optional[Tape], op: str
) -> LossValue:
    zero = np.zeros((), dtype=source.dtype)

    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.zeros_like(source.values),)

    return LossValue(make_output(op, zero, [source], tape, grad_fn), True)


def occupancy_loss(
    logits: DenseTensor,
    gt: OccupancyGrid,
    weights: np.ndarray,
    mask: VisibilityMask,
    tape: Optional[Tape] = None,
) -> LossValue:
    """
    Class-weighted softmax cross-entropy, averaged over visible voxels.

    Args:
        logits (DenseTensor): class scores [H, W, Z, M+1].
        gt (OccupancyGrid): ground-truth labels.
        weights (np.ndarray): per-class weights [M+1].
        mask (VisibilityMask): voxels to supervise.

    Returns:
        LossValue: the loss; 0 with empty_mask=True when no voxel is visible.
    """
    values = logits.values
    _check_shapes(values.shape[:3], gt.labels, mask.mask)
    if weights.shape != (values.shape[3],):
        raise ShapeError(f"Expected {values.shape[3]} class weights, got {weights.shape}")
    visible = mask.mask.astype(bool)
    count = int(visible.sum())
    if count == 0:
        return _empty_loss(logits, tape, "occupancy_loss")

    scores = values[visible]
    labels = gt.labels[visible].astype(np.int64)
    voxel_weights = weights[labels].astype(values.dtype)
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_prob = shifted[np.arange(count), labels] - log_norm
    loss = -np.sum(voxel_weights * log_prob) / count

    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        probs = np.exp(shifted - log_norm[:, None])
        probs[np.arange(count), labels] -= 1.0
        grad = np.zeros_like(values)
        grad[visible] = g * probs * (voxel_weights / count)[:, None]
        return (grad,)

    return LossValue(
        make_output("occupancy_loss", np.asarray(loss, dtype=values.dtype), [logits], tape, grad_fn),
        False,
    )


def cvt_loss(
    weights: DenseTensor,
    gt: OccupancyGrid,
    mask: VisibilityMask,
    tape: Optional[Tape] = None,
) -> LossValue:
    """
    Binary cross-entropy between the refinement weights and gt occupancy (label != Free),
    summed over visible voxels and divided by their count.

    Exceptions:
        DomainError: if a weight lies outside (0, 1).
    """
    w = weights.values
    _check_shapes(w.shape, gt.labels, mask.mask)
    if np.any(w <= 0) or np.any(w >= 1):
        raise DomainError("CVT weights must lie strictly inside (0, 1)")
    visible = mask.mask.astype(bool)
    count = int(visible.sum())
    if count == 0:
        return _empty_loss(weights, tape, "cvt_loss")

    occupied = (gt.labels[visible] != FREE_CLASS).astype(w.dtype)
    wv = w[visible]
    loss = -np.sum(occupied * np.log(wv) + (1 - occupied) * np.log(1 - wv)) / count

    def grad_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        grad = np.zeros_like(w)
        grad[visible] = -g * (occupied / wv - (1 - occupied) / (1 - wv)) / count
        return (grad,)

    return LossValue(
        make_output("cvt_loss", np.asarray(loss, dtype=w.dtype), [weights], tape, grad_fn),
        False,
    )


def total_loss(
    l_occ: DenseTensor,
    l_cvt: DenseTensor,
    cvt_lambda: float,
    tape: Optional[Tape] = None,
) -> DenseTensor:
    """Loss = L_occ + lambda * L_cvt."""
    assert cvt_lambda >= 0, "lambda must be nonnegative"
    return weighted_sum(l_occ, l_cvt, cvt_lambda, tape)
