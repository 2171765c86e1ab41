#!/bin/env python

from typing import Any, Sequence

from rich.console import Console
from rich.table import Table

from cvtocc.metrics_eval import SPLIT_FAR, SPLIT_FAST, SPLIT_NEAR, SPLIT_SLOW, EvalReport

# Initialize the console
console = Console()


def _cell(value: Any) -> str:
    if value is None:
        return "[dim]n/a[/dim]"
    if isinstance(value, float):
        return f"{100 * value:.2f}"
    return str(value)


def print_report(console: Console, report: EvalReport, title: str = "Evaluation") -> None:
    """
    Print an evaluation report as two tables: per-class IoU, then the split summaries.
    IoU values are shown as percentages.

    Args:
        console (Console): The Rich console instance to use for printing.
        report (EvalReport): The report to print.
        title (str): Caption of the per-class table.

    Side effects:
        - Prints to the console.
    """
    classes = Table(title=title)
    classes.add_column("Class", style="magenta")
    classes.add_column("IoU %", justify="right", style="green")
    classes.add_column("Intersection", justify="right")
    classes.add_column("Union", justify="right")
    tally = report.tallies["all"]
    for c, (name, iou) in enumerate(zip(report.class_names, report.per_class_iou)):
        label = f"{name} (excluded)" if c in report.excluded else name
        classes.add_row(label, _cell(iou), str(tally.intersection[c]), str(tally.union[c]))
    console.print(classes)

    free, nonfree = report.binary_iou
    summary = Table(title="Summary")
    summary.add_column("Metric", style="magenta")
    summary.add_column("Value %", justify="right", style="green bold")
    for name, value in [
        ("mIoU", report.miou),
        ("Non-Free IoU", nonfree),
        ("Free IoU", free),
        ("near mIoU", report.split_miou(SPLIT_NEAR)),
        ("far mIoU", report.split_miou(SPLIT_FAR)),
        ("slow mIoU", report.split_miou(SPLIT_SLOW)),
        ("fast mIoU", report.split_miou(SPLIT_FAST)),
    ]:
        summary.add_row(name, _cell(value))
    console.print(summary)
    console.print(
        f"Samples: [green bold]{report.sample_count}[/green bold], "
        f"visible voxels: [green bold]{report.voxel_count}[/green bold]"
    )


def print_sweep(console: Console, rows: Sequence[dict[str, Any]]) -> None:
    """Print aggregated sweep rows; diverged runs are flagged in red."""
    table = Table(title="Ablation sweep")
    table.add_column("Axis", style="magenta")
    table.add_column("Value")
    table.add_column("Seeds", justify="right")
    table.add_column("Time span s", justify="right")
    table.add_column("mIoU %", justify="right", style="green bold")
    table.add_column("Non-Free IoU %", justify="right", style="green")
    table.add_column("near / far", justify="right")
    table.add_column("slow / fast", justify="right")
    table.add_column("Diverged", justify="right")
    for row in rows:
        miou = _cell(row["miou_mean"])
        if row["miou_std"] is not None:
            miou += f" ± {100 * row['miou_std']:.2f}"
        diverged = row["diverged"]
        table.add_row(
            row["axis"],
            str(row["value"]),
            str(row["seeds"]),
            f"{row['time_span']:g}",
            miou,
            _cell(row["nonfree_iou_mean"]),
            f"{_cell(row['near_miou_mean'])} / {_cell(row['far_miou_mean'])}",
            f"{_cell(row['slow_miou_mean'])} / {_cell(row['fast_miou_mean'])}",
            f"[red bold]{diverged}[/red bold]" if diverged else "0",
        )
    console.print(table)
