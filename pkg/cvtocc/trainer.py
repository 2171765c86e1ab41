"""
End-to-end optimisation of the refinement head and the occupancy decoder.

One step takes one sample: build the cost volume of its window, refine (or pass the current
features through unchanged in baseline mode), decode, compute L_occ + lambda * L_cvt, run
backward over the step's tape, and apply AdamW at the cosine-annealed learning rate.

Functions:
    adamw_step(params, grads, state, lr, betas, eps, weight_decay)
    cosine_lr(step, total_steps, lr0)
    train(cfg, dataset, verbose, checkpoint, until_epoch)
    resume(checkpoint, dataset, verbose)
    evaluate_model(model, samples, cfg, class_set, grid)
"""

from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from cvtocc.constants import SPLIT_EVAL, SPLIT_TRAIN
from cvtocc.cost_volume import (
    CvtHeadParams,
    RefinedVolume,
    TemporalWindow,
    build_cost_volume,
    pass_through_volume,
    refine_volume,
)
from cvtocc.errors import ConfigError, DivergenceError, DomainError, NonFiniteError
from cvtocc.grid_geometry import GridSpec, StrideSet
from cvtocc.metrics_eval import EvalReport, evaluate
from cvtocc.occupancy_head import (
    ClassSet,
    DecoderParams,
    class_weights,
    cvt_loss,
    decode,
    occupancy_loss,
    predict,
    total_loss,
)
from cvtocc.printing import console
from cvtocc.pure import config_hash, format_value
from cvtocc.synthetic_world import FrameSample, SyntheticDataset
from cvtocc.tensor_autodiff import DenseTensor, ParamTensor, Tape, backward


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimisation settings. `source` is the resolved flat config the settings were read from;
    it travels into checkpoints so a run can be evaluated or resumed from the file alone.
    """

    epochs: int = 20
    batch_size: int = 1
    learning_rate: float = 2.0e-3
    weight_decay: float = 0.01
    cvt_lambda: float = 1.0
    seed: int = 0
    frame_count: int = 7
    frame_interval: float = 0.5
    strides: StrideSet = field(default_factory=lambda: StrideSet((-4, -3, -2, -1, 0, 1, 2, 3, 4)))
    interpolation: str = "trilinear"
    cvt_supervision: bool = True
    baseline_mode: bool = False
    hidden_width: int = 32
    excluded_classes: Tuple[int, ...] = ()
    log_train_miou: bool = True
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    source: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size != 1:
            raise ConfigError(f"Only batch size 1 is supported, got {self.batch_size}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be nonnegative")
        if self.cvt_lambda < 0:
            raise ConfigError(f"cvt_lambda must be nonnegative, got {self.cvt_lambda}")
        if self.hidden_width < 1:
            raise ConfigError(f"hidden_width must be positive, got {self.hidden_width}")

    @property
    def effective_lambda(self) -> float:
        """The weight of L_cvt in the total loss; 0 without CVT supervision."""
        return self.cvt_lambda if self.cvt_supervision else 0.0

    @staticmethod
    def from_config(config: dict[str, Any]) -> "TrainConfig":
        return TrainConfig(
            epochs=config["epochs"],
            batch_size=config["batch_size"],
            learning_rate=config["learning_rate"],
            weight_decay=config["weight_decay"],
            cvt_lambda=config["cvt_lambda"],
            seed=config["seed"],
            frame_count=config["frame_count"],
            frame_interval=config["frame_interval"],
            strides=StrideSet(tuple(config["strides"])),
            interpolation=config["interpolation"],
            cvt_supervision=config["cvt_supervision"],
            baseline_mode=config["baseline_mode"],
            hidden_width=config["hidden_width"],
            excluded_classes=tuple(config["excluded_classes"]),
            log_train_miou=config["log_train_miou"],
            source=dict(config),
        )


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Sequence[ParamTensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """
    One AdamW update, in place on the parameter values.

    The decay is decoupled: each parameter is first scaled by (1 - lr * weight_decay), then
    moved by the bias-corrected Adam step.

    Returns:
        AdamState: the state after the update (the same object, with step incremented).
    """
    assert len(params) == len(grads), "one gradient per parameter"
    beta1, beta2 = betas
    state.step += 1
    t = state.step
    for p, g in zip(params, grads):
        if g.shape != p.values.shape:
            raise ConfigError(f"Gradient {g.shape} does not fit parameter {p.name} {p.shape}")
        m = state.m.get(p.name, np.zeros_like(p.values))
        v = state.v.get(p.name, np.zeros_like(p.values))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        decayed = p.values * (1 - lr * weight_decay)
        p.values = (decayed - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.values.dtype)
        state.m[p.name] = m.astype(p.values.dtype)
        state.v[p.name] = v.astype(p.values.dtype)
    return state


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total_steps)) / 2."""
    if not 0 <= step <= total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return float(lr0 * 0.5 * (1.0 + np.cos(np.pi * step / total_steps)))


@dataclass
class Model:
    """Decoder plus, unless in baseline mode, the refinement head."""

    decoder: DecoderParams
    cvt: Optional[CvtHeadParams] = None

    @staticmethod
    def initialise(
        cfg: TrainConfig,
        channels: int,
        num_outputs: int,
        rng: np.random.Generator,
        dtype: type = np.float32,
    ) -> "Model":
        cvt = None
        if not cfg.baseline_mode:
            in_channels = cfg.frame_count * len(cfg.strides) * channels
            cvt = CvtHeadParams.initialise(in_channels, cfg.hidden_width, rng, dtype)
        return Model(DecoderParams.initialise(channels, num_outputs, rng, dtype), cvt)

    def parameters(self) -> list[ParamTensor]:
        head = self.cvt.parameters() if self.cvt is not None else []
        return head + self.decoder.parameters()

    def forward(
        self, window: TemporalWindow, cfg: TrainConfig, tape: Optional[Tape] = None
    ) -> Tuple[RefinedVolume, DenseTensor]:
        if self.cvt is None:
            refined = pass_through_volume(window)
        else:
            cv = build_cost_volume(window, cfg.strides, cfg.interpolation)
            refined = refine_volume(window, cv, self.cvt, tape)
        return refined, decode(refined, self.decoder, tape)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.values for p in self.parameters()}

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in tensors:
                raise ConfigError(f"Checkpoint has no tensor {p.name}")
            if tensors[p.name].shape != p.shape:
                raise ConfigError(
                    f"Checkpoint tensor {p.name} has shape {tensors[p.name].shape}, "
                    f"expected {p.shape}"
                )
            p.values = tensors[p.name].astype(p.dtype)


class StepLosses(NamedTuple):
    total: float
    occ: float
    cvt: Optional[float]
    empty_mask: bool


class MetricRow(NamedTuple):
    epoch: int
    split: str
    metric: str
    value: Optional[float]


@dataclass
class Checkpoint:
    """
    Everything needed to evaluate a trained model or resume its training bit-exactly.

    Attributes:
        params (dict[str, np.ndarray]): model tensors by name.
        adam (AdamState): optimizer moments and step count.
        config (dict): the resolved flat config of the run.
        config_hash (str): hash of `config`.
        epoch (int): number of completed epochs.
        seed (int): the run's seed.
        rng_state (dict): bit generator state after the last completed epoch.
    """

    params: dict[str, np.ndarray]
    adam: AdamState
    config: dict[str, Any]
    config_hash: str
    epoch: int
    seed: int
    rng_state: dict[str, Any]


class TrainResult(NamedTuple):
    checkpoint: Checkpoint
    log: list[MetricRow]


def class_frequencies(samples: Sequence[FrameSample], num_outputs: int) -> np.ndarray:
    """Voxel count of each class among the visible voxels of the samples."""
    counts = np.zeros(num_outputs, dtype=np.int64)
    for sample in samples:
        labels = sample.gt.labels[sample.mask.mask.astype(bool)]
        counts += np.bincount(labels.astype(np.int64), minlength=num_outputs)
    return counts


def _check_dataset(cfg: TrainConfig, dataset: SyntheticDataset) -> None:
    if not dataset.train:
        raise ConfigError("The training split is empty")
    if dataset.frame_count != cfg.frame_count:
        raise ConfigError(
            f"Dataset windows have {dataset.frame_count} frames, config asks for {cfg.frame_count}"
        )
    if abs(dataset.frame_interval - cfg.frame_interval) > 1e-9:
        raise ConfigError(
            f"Dataset frame interval {dataset.frame_interval} s differs from the config's "
            f"{cfg.frame_interval} s"
        )


def train_step(
    model: Model,
    sample: FrameSample,
    weights: np.ndarray,
    cfg: TrainConfig,
    lr: float,
    adam: AdamState,
) -> StepLosses:
    """
    Forward, backward and one optimizer update on a single sample.

    Exceptions:
        DivergenceError: if any forward value or the loss is non-finite.
    """
    tape = Tape()
    try:
        refined, logits = model.forward(sample.window, cfg, tape)
        l_occ = occupancy_loss(logits, sample.gt, weights, sample.mask, tape)
        if model.cvt is None:
            loss, cvt_value = l_occ.loss, None
        else:
            l_cvt = cvt_loss(refined.weights, sample.gt, sample.mask, tape)
            loss = total_loss(l_occ.loss, l_cvt.loss, cfg.effective_lambda, tape)
            cvt_value = l_cvt.loss.item()
        if not np.isfinite(loss.item()):
            raise NonFiniteError("loss is not finite")
        backward(tape, loss)
    except NonFiniteError as e:
        raise DivergenceError(f"Training diverged: {e}") from e

    params = model.parameters()
    grads = [p.grad for p in params]
    adamw_step(params, grads, adam, lr, cfg.betas, cfg.eps, cfg.weight_decay)
    for p in params:
        p.zero_grad()
    return StepLosses(loss.item(), l_occ.loss.item(), cvt_value, l_occ.empty_mask)


def evaluate_model(
    model: Model,
    samples: Sequence[FrameSample],
    cfg: TrainConfig,
    class_set: ClassSet,
    grid: GridSpec,
) -> EvalReport:
    """Predict every sample and evaluate the predictions."""
    preds = [predict(model.forward(s.window, cfg)[1]) for s in samples]
    return evaluate(
        preds,
        [s.gt for s in samples],
        [s.mask for s in samples],
        [s.ego_speed for s in samples],
        class_set,
        grid,
        cfg.excluded_classes,
    )


def model_from_checkpoint(
    checkpoint: Checkpoint, channels: int, num_outputs: int
) -> Tuple[Model, TrainConfig]:
    cfg = TrainConfig.from_config(checkpoint.config)
    scratch = np.random.default_rng(0)
    model = Model.initialise(cfg, channels, num_outputs, scratch)
    model.load_state_dict(checkpoint.params)
    return model, cfg


def train(
    cfg: TrainConfig,
    dataset: SyntheticDataset,
    verbose: bool = False,
    checkpoint: Optional[Checkpoint] = None,
    until_epoch: Optional[int] = None,
) -> TrainResult:
    """
    Train on the dataset's train split, logging per epoch the mean losses, the train mIoU
    and, when there is an eval split, the eval mIoU.

    Args:
        cfg (TrainConfig): settings; cfg.source is stored in the checkpoint.
        dataset (SyntheticDataset): samples whose windows match cfg.frame_count.
        verbose (bool): print a line per epoch.
        checkpoint (Optional[Checkpoint]): continue from this state instead of starting fresh.
        until_epoch (Optional[int]): stop after this many completed epochs (default cfg.epochs).

    Exceptions:
        ConfigError: if the dataset is empty or does not match the config.
        DivergenceError: if the loss becomes non-finite.

    Returns:
        TrainResult: the final checkpoint and the metric rows of the epochs run.
    """
    _check_dataset(cfg, dataset)
    channels = dataset.train[0].window.current.channels
    class_set = dataset.class_set

    rng = np.random.default_rng(cfg.seed)
    model = Model.initialise(cfg, channels, class_set.num_outputs, rng)
    adam = AdamState()
    start_epoch = 0
    if checkpoint is not None:
        model.load_state_dict(checkpoint.params)
        adam = AdamState(
            checkpoint.adam.step, dict(checkpoint.adam.m), dict(checkpoint.adam.v)
        )
        start_epoch = checkpoint.epoch
        rng.bit_generator.state = checkpoint.rng_state

    weights = class_weights(class_frequencies(dataset.train, class_set.num_outputs))
    steps_per_epoch = len(dataset.train)
    total_steps = cfg.epochs * steps_per_epoch
    log: list[MetricRow] = []

    stop_epoch = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    for epoch in range(start_epoch, stop_epoch):
        order = rng.permutation(steps_per_epoch)
        losses: list[StepLosses] = []
        for position, index in enumerate(order):
            lr = cosine_lr(epoch * steps_per_epoch + position, total_steps, cfg.learning_rate)
            step = train_step(model, dataset.train[index], weights, cfg, lr, adam)
            if step.empty_mask and verbose:
                console.print(
                    f"[yellow]Sample {index} has no visible voxels; its loss is 0[/yellow]"
                )
            losses.append(step)

        number = epoch + 1
        log.append(MetricRow(number, SPLIT_TRAIN, "loss", float(np.mean([s.total for s in losses]))))
        log.append(MetricRow(number, SPLIT_TRAIN, "l_occ", float(np.mean([s.occ for s in losses]))))
        cvt_values = [s.cvt for s in losses if s.cvt is not None]
        log.append(
            MetricRow(
                number, SPLIT_TRAIN, "l_cvt", float(np.mean(cvt_values)) if cvt_values else None
            )
        )
        if cfg.log_train_miou:
            report = evaluate_model(model, dataset.train, cfg, class_set, dataset.grid)
            log.append(MetricRow(number, SPLIT_TRAIN, "miou", report.miou))
        if dataset.eval:
            report = evaluate_model(model, dataset.eval, cfg, class_set, dataset.grid)
            log.append(MetricRow(number, SPLIT_EVAL, "miou", report.miou))
        if verbose:
            summary = ", ".join(
                f"{row.split} {row.metric} [green bold]{format_value(row.value)}[/green bold]"
                for row in log
                if row.epoch == number
            )
            console.print(f"Epoch {number}/{cfg.epochs}: {summary}")

    final = Checkpoint(
        params={name: values.copy() for name, values in model.state_dict().items()},
        adam=adam,
        config=dict(cfg.source),
        config_hash=config_hash(cfg.source),
        epoch=max(stop_epoch, start_epoch),
        seed=cfg.seed,
        rng_state=rng.bit_generator.state,
    )
    return TrainResult(final, log)


def resume(
    checkpoint: Checkpoint, dataset: SyntheticDataset, verbose: bool = False
) -> TrainResult:
    """Continue a run from a checkpoint until its configured epoch count."""
    return train(TrainConfig.from_config(checkpoint.config), dataset, verbose, checkpoint)
