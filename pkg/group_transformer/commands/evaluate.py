"""Evaluation command."""

from pathlib import Path
from typing import List

import typer
from rich.console import Console

from ..core.evaluation import display_results_table, format_report, score
from ..core.scene import read_groups

console = Console()


def evaluate(
    pred: List[Path] = typer.Option(..., "--pred", "-p", help="Predicted groups file (repeatable)"),
    gt: List[Path] = typer.Option(..., "--gt", "-g", help="Ground truth: scene JSON or groups file (repeatable)"),
    table: bool = typer.Option(False, "--table", help="Also show a summary table"),
):
    """Score predicted groups against ground truth with the half metric."""

    if len(pred) != len(gt):
        console.print(f"[red]Error: {len(pred)} --pred files but {len(gt)} --gt files[/red]")
        raise typer.Exit(1)
    results = [(p.stem, score(read_groups(p), read_groups(g))) for p, g in zip(pred, gt)]
    console.print(format_report(results), end="", markup=False, highlight=False, soft_wrap=True)
    if table:
        display_results_table(results)
