"""Scene generation and perturbation commands."""

from pathlib import Path
from typing import Optional

import typer
from rich.console import Console

from ..core.config import load_config
from ..core.scene import drop_detections, load_scene, perturb_boxes, save_scene, write_features
from ..core.synthetic import generate_corpus
from ..models import GenConfig

console = Console()


def gen(
    out: Path = typer.Option(..., "--out", "-o", help="Output directory for scenes, features and manifest"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Generator config (key=value)"),
    scenes: int = typer.Option(1, "--scenes", "-n", min=1, help="Number of scenes"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed (defaults to the config seed)"),
):
    """Generate synthetic scenes with ground-truth groups."""

    gen_config = load_config(config, GenConfig) if config else GenConfig()
    manifest = generate_corpus(gen_config, scenes, out, seed)
    console.print(f"[green]✓ Wrote {scenes} scene(s) to {out}[/green]")
    console.print(f"Manifest: {manifest}")


def perturb(
    scene: Path = typer.Option(..., "--scene", "-s", help="Scene JSON"),
    out: Path = typer.Option(..., "--out", "-o", help="Perturbed scene JSON"),
    sigma: float = typer.Option(0.0, "--sigma", min=0.0, help="Box noise, relative to box size"),
    mdr: float = typer.Option(0.0, "--mdr", min=0.0, help="Missing detection rate in [0, 1)"),
    seed: int = typer.Option(0, "--seed", help="Random seed"),
    features: Optional[Path] = typer.Option(None, "--features", "-f", help="Feature file of the scene"),
    features_out: Optional[Path] = typer.Option(None, "--features-out", help="Where to write the kept features"),
):
    """Apply box noise and/or drop detections."""

    if features_out and not features:
        console.print("[red]Error: --features-out needs --features[/red]")
        raise typer.Exit(1)
    original = load_scene(scene, features)
    perturbed = drop_detections(perturb_boxes(original, sigma, seed), mdr, seed)
    save_scene(perturbed, out)
    if features_out:
        write_features(perturbed, features_out)
    removed = len(original.persons) - len(perturbed.persons)
    console.print(
        f"[green]✓ Perturbed scene written to {out}[/green] "
        f"(sigma={sigma}, mdr={mdr}, persons removed: {removed})"
    )
