"""
Command-line interface for generating synthetic occupancy datasets, training the temporal
cost-volume refinement model, evaluating checkpoints and running ablation sweeps.

Exit codes: 0 on success, 2 on a usage, config or container error, 3 when training diverges.
"""

import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Optional

import click
from toolz import groupby, merge  # type: ignore

from cvtocc import constants
from cvtocc.config_schema import validate_manifest
from cvtocc.cost_volume import cost_volume_shape
from cvtocc.errors import CvtOccError, DivergenceError
from cvtocc.load import load_config, load_manifest, read_checkpoint, read_dataset
from cvtocc.metrics_eval import SPLIT_FAR, SPLIT_FAST, SPLIT_NEAR, SPLIT_SLOW
from cvtocc.printing import console, print_report, print_sweep
from cvtocc.pure import (
    apply_sweep_value,
    config_hash,
    format_size,
    format_value,
    mean_std,
    parse_sweep_option,
    time_span,
)
from cvtocc.save import write_checkpoint, write_dataset, write_eval_report, write_metric_log, write_sweep
from cvtocc.synthetic_world import (
    SceneConfig,
    SyntheticDataset,
    ambiguity_rate,
    generate_dataset,
)
from cvtocc.trainer import (
    TrainConfig,
    evaluate_model,
    model_from_checkpoint,
    train,
)

CHECKPOINT_NAME = "checkpoint.cvt"
METRIC_LOG_NAME = "metrics.csv"
SWEEP_NAME = "sweep.csv"


def _guarded(action: Callable[[], None]) -> None:
    """Run a command body, mapping cvtocc errors onto exit codes."""
    try:
        action()
    except DivergenceError as e:
        console.print(f"[red bold]{e}[/red bold]")
        sys.exit(constants.EXIT_DIVERGED)
    except CvtOccError as e:
        console.print(f"[red bold]{e}[/red bold]")
        sys.exit(constants.EXIT_USAGE)


def _resolve_config(config_file: Optional[str], seed: Optional[int]) -> dict[str, Any]:
    config = load_config(config_file or str(constants.CONFIG_FILE))
    if seed is not None:
        config = merge(config, {"seed": seed})
    return config


def build_dataset(config: dict[str, Any], verbose: bool = False) -> SyntheticDataset:
    scene_cfg = SceneConfig.from_config(config)
    return generate_dataset(
        scene_cfg, config["train_samples"], config["eval_samples"], verbose
    )


def run_sweep_point(config: dict[str, Any]) -> dict[str, Any]:
    """
    Generate, train and evaluate one sweep run. A diverged run is reported, not raised.
    Top-level so it can run in a worker process.
    """
    dataset = build_dataset(config)
    try:
        result = train(TrainConfig.from_config(config), dataset)
    except DivergenceError:
        return {"diverged": True}
    cfg = TrainConfig.from_config(config)
    model, _ = model_from_checkpoint(
        result.checkpoint,
        dataset.train[0].window.current.channels,
        dataset.class_set.num_outputs,
    )
    samples = dataset.eval or dataset.train
    report = evaluate_model(model, samples, cfg, dataset.class_set, dataset.grid)
    return {
        "diverged": False,
        "miou": report.miou,
        "nonfree_iou": report.binary_iou[1],
        "near_miou": report.split_miou(SPLIT_NEAR),
        "far_miou": report.split_miou(SPLIT_FAR),
        "slow_miou": report.split_miou(SPLIT_SLOW),
        "fast_miou": report.split_miou(SPLIT_FAST),
    }


def aggregate_sweep(
    axis: str, runs: list[tuple[int, Any, dict[str, Any], dict[str, Any]]]
) -> list[dict[str, Any]]:
    """
    One row per sweep value: mean (and std for mIoU and Non-Free IoU) over the seeds whose
    run did not diverge.

    Args:
        runs: (value position, value, run config, run result) per run.
    """
    rows = []
    by_value = groupby(lambda run: run[0], runs)
    for position in sorted(by_value):
        group = by_value[position]
        value, run_config = group[0][1], group[0][2]
        finished = [r for _, _, _, r in group if not r["diverged"]]

        def collect(key: str) -> list[float]:
            return [r[key] for r in finished if r[key] is not None]

        miou_mean, miou_std = mean_std(collect("miou"))
        nonfree_mean, nonfree_std = mean_std(collect("nonfree_iou"))
        rows.append(
            {
                "axis": axis,
                "value": value,
                "seeds": len(group),
                "miou_mean": miou_mean,
                "miou_std": miou_std,
                "nonfree_iou_mean": nonfree_mean,
                "nonfree_iou_std": nonfree_std,
                "near_miou_mean": mean_std(collect("near_miou"))[0],
                "far_miou_mean": mean_std(collect("far_miou"))[0],
                "slow_miou_mean": mean_std(collect("slow_miou"))[0],
                "fast_miou_mean": mean_std(collect("fast_miou"))[0],
                "time_span": time_span(run_config["frame_count"], run_config["frame_interval"]),
                "diverged": len(group) - len(finished),
            }
        )
    return rows


@click.group()
@click.version_option(version=constants.VERSION, prog_name="cvtocc")
def main() -> None:
    """
    Temporal cost-volume refinement for 3D semantic occupancy, on synthetic driving scenes.
    """


@main.command()
@click.option(
    "-c",
    "--config",
    "config_file",
    type=click.Path(dir_okay=False),
    help="YAML config file. Defaults to the user config file, created on first use.",
)
@click.option(
    "-o", "--out", "out", type=click.Path(dir_okay=False), required=True, help="Dataset file to write."
)
@click.option("--seed", "seed", type=int, help="Override the config's seed.")
@click.option("-v", "--verbose", is_flag=True, help="Report progress.")
def generate(config_file: Optional[str], out: str, seed: Optional[int], verbose: bool) -> None:
    """Generate a synthetic dataset container."""

    def action() -> None:
        config = _resolve_config(config_file, seed)
        dataset = build_dataset(config, verbose)
        size = write_dataset(out, dataset, config_hash(config), config["strides"])
        samples = dataset.train + dataset.eval
        console.print(
            f"Wrote [green bold]{len(samples)}[/green bold] samples "
            f"({len(dataset.train)} train, {len(dataset.eval)} eval) to "
            f"[green bold]{out}[/green bold] ({format_size(size)})"
        )
        console.print(
            f"Ambiguity rate: [green bold]{format_value(ambiguity_rate(samples))}[/green bold]"
        )
        if verbose:
            shape = cost_volume_shape(
                dataset.grid,
                config["frame_count"],
                len(config["strides"]),
                config["feature_channels"],
            )
            console.print(f"Cost volume shape per sample: [green bold]{shape}[/green bold]")

    _guarded(action)


@main.command(name="train")
@click.option("-c", "--config", "config_file", type=click.Path(dir_okay=False), help="YAML config file.")
@click.option(
    "-d", "--dataset", "dataset_file", type=click.Path(dir_okay=False), required=True, help="Dataset container."
)
@click.option(
    "-o", "--out", "out", type=click.Path(file_okay=False), required=True,
    help=f"Output directory for {CHECKPOINT_NAME} and {METRIC_LOG_NAME}.",
)
@click.option("--seed", "seed", type=int, help="Override the config's seed.")
@click.option(
    "--resume", "resume_file", type=click.Path(dir_okay=False),
    help="Continue from this checkpoint; its own config is used.",
)
@click.option("-v", "--verbose", is_flag=True, help="Print a line per epoch.")
def train_command(
    config_file: Optional[str],
    dataset_file: str,
    out: str,
    seed: Optional[int],
    resume_file: Optional[str],
    verbose: bool,
) -> None:
    """Train a model on a dataset."""

    def action() -> None:
        dataset, _ = read_dataset(dataset_file)
        checkpoint = None
        if resume_file is not None:
            checkpoint = read_checkpoint(resume_file)
            config = checkpoint.config
        else:
            config = _resolve_config(config_file, seed)
        cfg = TrainConfig.from_config(config)
        console.print(
            f"Training on [green bold]{len(dataset.train)}[/green bold] samples for "
            f"[green bold]{cfg.epochs}[/green bold] epochs"
            + (" (baseline, no refinement)" if cfg.baseline_mode else "")
        )
        result = train(cfg, dataset, verbose, checkpoint)
        checkpoint_path = os.path.join(out, CHECKPOINT_NAME)
        write_checkpoint(checkpoint_path, result.checkpoint)
        write_metric_log(os.path.join(out, METRIC_LOG_NAME), result.log, config_hash(config))
        console.print(f"Checkpoint written to [green bold]{checkpoint_path}[/green bold]")

    _guarded(action)


@main.command(name="eval")
@click.option(
    "-k", "--checkpoint", "checkpoint_file", type=click.Path(dir_okay=False), required=True,
    help="Checkpoint container.",
)
@click.option(
    "-d", "--dataset", "dataset_file", type=click.Path(dir_okay=False), required=True, help="Dataset container."
)
@click.option(
    "-o", "--out", "out", type=click.Path(dir_okay=False), required=True,
    help="Report CSV to write; a JSON summary is written next to it.",
)
@click.option(
    "--split", "split", type=click.Choice([constants.SPLIT_TRAIN, constants.SPLIT_EVAL]),
    default=constants.SPLIT_EVAL, show_default=True, help="Dataset split to evaluate.",
)
def eval_command(checkpoint_file: str, dataset_file: str, out: str, split: str) -> None:
    """Evaluate a checkpoint on a dataset split."""

    def action() -> None:
        checkpoint = read_checkpoint(checkpoint_file)
        dataset, _ = read_dataset(dataset_file)
        samples = dataset.split(split)
        if not samples:
            console.print(f"[red bold]The {split} split of {dataset_file} is empty[/red bold]")
            sys.exit(constants.EXIT_USAGE)
        model, cfg = model_from_checkpoint(
            checkpoint, samples[0].window.current.channels, dataset.class_set.num_outputs
        )
        report = evaluate_model(model, samples, cfg, dataset.class_set, dataset.grid)
        summary_path = write_eval_report(out, report, checkpoint.config_hash)
        print_report(console, report, title=f"Evaluation on {split}")
        console.print(f"Report written to [green bold]{out}[/green bold] and {summary_path}")

    _guarded(action)


@main.command()
@click.argument("manifest_file", type=click.Path(dir_okay=False))
@click.option("-c", "--config", "config_file", type=click.Path(dir_okay=False), help="Overrides the manifest's config.")
@click.option(
    "-o", "--out", "out", type=click.Path(file_okay=False),
    help=f"Output directory for {SWEEP_NAME}; overrides the manifest's output_dir.",
)
@click.option("-j", "--jobs", "jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Parallel runs.")
@click.option("--sweep", "sweep", help="Override the manifest's sweep, as axis=v1,v2,...")
def ablate(
    manifest_file: str,
    config_file: Optional[str],
    out: Optional[str],
    jobs: int,
    sweep: Optional[str],
) -> None:
    """Train and evaluate one model per sweep value and seed; write mean and std per value."""

    def action() -> None:
        manifest = load_manifest(manifest_file)
        if sweep is not None:
            axis, values = parse_sweep_option(sweep)
            manifest = merge(manifest, {"sweep": {"axis": axis, "values": values}})
            validate_manifest(manifest)
        base = _resolve_config(config_file or manifest.get("config"), None)
        axis = manifest["sweep"]["axis"]
        values = manifest["sweep"].get("values", []) if axis != "none" else ["none"]
        output_dir = out or manifest.get("output_dir") or os.getcwd()

        plan = []
        for position, value in enumerate(values):
            for seed in manifest["seeds"]:
                run_config = apply_sweep_value(merge(base, {"seed": seed}), axis, value)
                plan.append((position, value, run_config))
        console.print(
            f"Sweeping [green bold]{axis}[/green bold] over {len(values)} value(s) x "
            f"{len(manifest['seeds'])} seed(s) with [green bold]{jobs}[/green bold] job(s)"
        )

        configs = [run_config for _, _, run_config in plan]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as executor:
                results = list(executor.map(run_sweep_point, configs))
        else:
            results = [run_sweep_point(c) for c in configs]
        for (_, value, run_config), result in zip(plan, results):
            if result["diverged"]:
                console.print(
                    f"[yellow]Run {axis}={value} seed {run_config['seed']} diverged[/yellow]"
                )

        rows = aggregate_sweep(
            axis, [(p, v, c, r) for (p, v, c), r in zip(plan, results)]
        )
        path = os.path.join(output_dir, SWEEP_NAME)
        write_sweep(path, rows, config_hash(base))
        print_sweep(console, rows)
        console.print(f"Sweep written to [green bold]{path}[/green bold]")

    _guarded(action)


if __name__ == "__main__":
    main()
