"""Training, inference and gradient-check commands."""

from enum import Enum
from pathlib import Path
from typing import List, Optional

import numpy as np
import typer
from rich.console import Console
from rich.table import Table

from ..core.config import load_config
from ..core.errors import ConfigError
from ..core.gradcheck import run_suite
from ..core.network import GroupTransformer, parameter_count
from ..core.pipeline import cluster_affinity, infer_affinity, train as train_model
from ..core.scene import Scene, load_scene, write_groups
from ..core.synthetic import read_manifest
from ..models import GradCheckResult, InferConfig, TrainConfig

console = Console()


class Preset(str, Enum):
    large = "large"
    small = "small"


def _load_scenes(manifest: Path) -> List[Scene]:
    return [load_scene(scene, features) for scene, features in read_manifest(manifest)]


def _with_app_dim(config: TrainConfig, scenes: List[Scene]) -> TrainConfig:
    dims = {scene.app_dim for scene in scenes}
    if len(dims) != 1:
        raise ConfigError(f"scenes disagree on app_dim: {sorted(dims)}")
    (app_dim,) = dims
    if app_dim == config.arch.app_dim:
        return config
    return config.model_copy(update={"arch": config.arch.model_copy(update={"app_dim": app_dim})})


def train(
    scenes: Path = typer.Option(..., "--scenes", help="Manifest of scene<TAB>features lines"),
    out: Path = typer.Option(..., "--out", "-o", help="Checkpoint to write"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Training config (key=value)"),
    preset: Preset = typer.Option(Preset.large, "--preset", help="Base hyperparameters"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Random seed (defaults to the config seed)"),
):
    """Train a model and save its checkpoint."""

    base = TrainConfig.large_scale() if preset is Preset.large else TrainConfig.small_scale()
    train_config = load_config(config, TrainConfig, base=base) if config else base
    corpus = _load_scenes(scenes)
    train_config = _with_app_dim(train_config, corpus)
    console.print(f"Training on {len(corpus)} scene(s) for {train_config.epochs} epoch(s)...")
    result = train_model(corpus, train_config, seed)
    result.model.save(out)

    losses = result.epoch_losses
    console.print(f"[green]✓ Checkpoint written to {out}[/green] ({parameter_count(result.model)} parameters)")
    if losses:
        console.print(f"Mean loss: first epoch {losses[0]:.4f}, last epoch {losses[-1]:.4f}")


def infer(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Trained checkpoint"),
    scene: Path = typer.Option(..., "--scene", "-s", help="Scene JSON"),
    out: Path = typer.Option(..., "--out", "-o", help="Predicted groups file"),
    features: Optional[Path] = typer.Option(None, "--features", "-f", help="Feature file of the scene"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Inference config (key=value)"),
    preset: Preset = typer.Option(Preset.large, "--preset", help="Base filtering and clustering settings"),
    affinity_out: Optional[Path] = typer.Option(None, "--affinity", help="Also save the affinity matrix (.npy)"),
):
    """Predict groups for one scene."""

    base = InferConfig.large_scale() if preset is Preset.large else InferConfig.small_scale()
    infer_config = load_config(config, InferConfig, base=base) if config else base
    model = GroupTransformer.load(checkpoint)
    target = load_scene(scene, features)
    affinity = infer_affinity(target, model, infer_config)
    groups = cluster_affinity(affinity, infer_config)
    write_groups(groups, out)
    if affinity_out:
        affinity_out.parent.mkdir(parents=True, exist_ok=True)
        with affinity_out.open("wb") as handle:
            np.save(handle, affinity.matrix)
    console.print(f"[green]✓ {len(groups)} group(s) written to {out}[/green]")


def display_gradcheck_table(results: List[GradCheckResult]) -> None:
    table = Table(title="Gradient Checks")
    table.add_column("Check", style="cyan")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Tolerance", justify="right")
    table.add_column("Status")
    for result in results:
        status = "[green]pass[/green]" if result.passed else "[red]FAIL[/red]"
        table.add_row(result.name, f"{result.error:.2e}", f"{result.tolerance:.0e}", status)
    console.print(table)


def gradcheck(
    seeds: int = typer.Option(10, "--seeds", min=1, help="Random points per check"),
    exhaustive: bool = typer.Option(False, "--exhaustive", help="Check every model parameter entry, not a sample"),
):
    """Run the finite-difference gradient suite; exit 0 only if every check passes."""

    results = run_suite(seeds, exhaustive=exhaustive)
    display_gradcheck_table(results)
    failed = [r for r in results if not r.passed]
    if failed:
        console.print(f"[red]{len(failed)} of {len(results)} checks failed[/red]")
        raise typer.Exit(1)
    console.print(f"[green]✓ All {len(results)} checks passed[/green]")
