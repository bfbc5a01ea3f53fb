# In fabricrpc/main.py

from typing import Optional

import typer

from . import __version__
from .config import settings
from .routers import invoke, mcts, transport
from .utils import setup_logging

app = typer.Typer(
    name="fabricrpc",
    help="Remote invocation over a simulated verbs fabric: benches and distributed search.",
    no_args_is_help=True,
)

bench = typer.Typer(help="Desk-scale experiments; every bench writes CSV.", no_args_is_help=True)

# --- Bench commands, one module each ---
for module in (transport, invoke, mcts):
    bench.registered_commands.extend(module.router.registered_commands)

app.add_typer(bench, name="bench")


@app.callback()
def main(
    log_level: Optional[str] = typer.Option(None, "--log-level", help="DEBUG, INFO, WARNING, ..."),
):
    setup_logging(log_level or settings.log_level)


@app.command()
def version():
    """Print the package version."""
    typer.echo(f"fabricrpc {__version__}")


if __name__ == "__main__":
    app()
