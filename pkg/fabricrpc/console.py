# In fabricrpc/console.py

import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Type, TypeVar

import typer
from pydantic import BaseModel, ValidationError
from rich.console import Console

from .config import Settings, settings
from .exceptions import ConfigError, FabricError
from .utils import write_csv

T = TypeVar("T")

err_console = Console(stderr=True)

EXIT_FAILURE = 1
EXIT_CONFIG = 2


def load_settings(config: Optional[Path] = None, **overrides) -> Settings:
    """Defaults, then the rendezvous file, then command-line flags. Unset flags are ignored."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if config is not None:
        return Settings.from_rendezvous(config, **overrides)
    return settings.replace(**overrides)


def parse_option(name: str, parse: Callable[[str], T], text: str) -> T:
    """Parse a flag value, reporting a bad one against its flag."""
    try:
        return parse(text)
    except ValueError as e:
        raise typer.BadParameter(str(e), param_hint=f"--{name}") from e


def emit(rows: Iterable[BaseModel], model: Type[BaseModel], out: Optional[Path]) -> None:
    if out is None:
        write_csv(rows, model, sys.stdout)
        return
    with out.open("w", newline="") as fh:
        write_csv(rows, model, fh)
    err_console.print(f"[green]wrote[/green] {out}")


@contextmanager
def cli_errors() -> Iterator[None]:
    """Turn package errors into a message on stderr and a non-zero exit code."""
    try:
        yield
    except (ConfigError, ValidationError, typer.BadParameter) as e:
        err_console.print(f"[bold red]config error:[/bold red] {e}")
        raise typer.Exit(code=EXIT_CONFIG) from e
    except FabricError as e:
        err_console.print(f"[bold red]error:[/bold red] {e}")
        raise typer.Exit(code=EXIT_FAILURE) from e
