import logging
import sys
from typing import Annotated, Optional, Sequence

import typer

try:  # typer >= 0.26 vendors click; its exceptions live in typer._click
    from typer import _click as click
except ImportError:
    import click
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape

from . import __version__
from .commands import data, evaluate, model
from .core.config import get_settings
from .core.errors import ValidationFailure

logger = logging.getLogger("group-transformer")
err_console = Console(stderr=True)

app = typer.Typer(
    help="group-transformer - detect social groups in multi-person scenes",
    no_args_is_help=True,
    add_completion=False,
)


def version_callback(value: bool):
    if value:
        print(f"group-transformer version {__version__}")
        raise typer.Exit()


def configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else get_settings().log_level
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


@app.callback()
def main_callback(
    version: Annotated[
        bool,
        typer.Option("--version", callback=version_callback, is_eager=True, help="Show version"),
    ] = None,
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging")] = False,
):
    """
    Train and run GroupTransformer models.

    Generate synthetic scenes, train on a manifest of scenes, predict groups
    for a scene and score predictions with the half metric.
    """
    configure_logging(verbose)


app.command("gen")(data.gen)
app.command("perturb")(data.perturb)
app.command("train")(model.train)
app.command("infer")(model.infer)
app.command("gradcheck")(model.gradcheck)
app.command("eval")(evaluate.evaluate)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI; 0 on success, 1 on usage or validation errors, 2 on I/O errors."""
    try:
        result = app(
            args=list(sys.argv[1:] if argv is None else argv),
            prog_name="group-transformer",
            standalone_mode=False,
        )
    except click.exceptions.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        err_console.print("[red]Aborted[/red]")
        return 1
    except ValidationFailure as exc:
        error = exc.payload()["error"]
        err_console.print(
            f"[red]Error ({error['code']}):[/red] {escape(error['message'])}",
            highlight=False,
            soft_wrap=True,
        )
        if error["details"]:
            logger.debug("Error details: %s", error["details"])
        return 1
    except OSError as exc:
        err_console.print(f"[red]I/O error:[/red] {escape(str(exc))}", highlight=False)
        return 2
    return result if isinstance(result, int) else 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
