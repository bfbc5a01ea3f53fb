# In fabricrpc/routers/invoke.py

import logging
import time
from pathlib import Path
from statistics import mean
from typing import Optional

import typer

from ..config import Settings
from ..console import cli_errors, emit, load_settings, parse_option
from ..fabric.calls import CallPolicy
from ..fabric.registry import Invocation
from ..fabric.system import SystemContext, ThreadContext
from ..schemas import InvokeRow
from ..utils import AtomicCounter, parse_size_range
from .transport import run_auto

log = logging.getLogger(__name__)

router = typer.Typer()

MODES = ("send", "write", "trad", "ovfl", "max-raw")
SINK = 0x1_0000


def run_calls(settings: Settings, mode: str, size: int, count: int) -> tuple[float, int]:
    """Thread 0 on machine 0 calls a sink on machine 1 `count` times with a `size`-byte buffer.

    Returns the wall time until the last call ran, and how many ran.
    """
    settings = settings.replace(machines=2, processes_per_machine=1, threads_per_process=1)
    system = SystemContext(settings)
    received = AtomicCounter()

    def sink(inv: Invocation) -> None:
        received.fetch_add(1)

    system.register(SINK, sink, "bench.sink")
    payload = bytes(size)

    def body(ctx: ThreadContext) -> None:
        if ctx.tid.flat != 0:
            return
        calls = ctx.calls(mode)
        for _ in range(count):
            calls.call_buffer(1, SINK, b"", payload, policy=CallPolicy.RETRY)

    try:
        started = time.perf_counter()
        system.run_workers(body, timeout=settings.finalize_timeout * 10)
        return time.perf_counter() - started, received.load()
    finally:
        system.shutdown()


def parse_modes(text: str) -> list[str]:
    modes = [m.strip() for m in text.split(",") if m.strip()]
    unknown = [m for m in modes if m not in MODES]
    if unknown or not modes:
        raise ValueError(f"unknown mode(s) {', '.join(unknown) or text!r}; choose from {', '.join(MODES)}")
    return modes


def invoke_rows(settings: Settings, sizes: list[int], modes: list[str], count: int,
                repeat: int = 3) -> list[InvokeRow]:
    unknown = [m for m in modes if m not in MODES]
    if unknown:
        raise ValueError(f"unknown mode(s) {', '.join(unknown)}; choose from {', '.join(MODES)}")
    rows = []
    for size in sizes:
        for mode in modes:
            if mode == "max-raw":
                runs = [(run_auto(settings, size, count)[0], count) for _ in range(repeat)]
            else:
                runs = [run_calls(settings, mode, size, count) for _ in range(repeat)]
            elapsed = mean(r[0] for r in runs)
            calls = runs[-1][1]
            rate = calls / elapsed if elapsed > 0 else 0.0
            rows.append(InvokeRow(mode=mode, size=size, calls=calls, calls_per_sec=round(rate, 1),
                                  MB_per_sec=round(rate * size / 1e6, 3)))
            log.info("invoke %s size=%d: %.0f calls/s", mode, size, rate)
    return rows


@router.command("invoke")
def invoke(
    sizes: str = typer.Option("8,64,256", help="buffer sizes, 'lo..hi' or a comma list"),
    modes: str = typer.Option(",".join(MODES), help="comma list of " + ", ".join(MODES)),
    count: int = typer.Option(2000, min=1, help="calls per measurement"),
    repeat: int = typer.Option(3, min=1),
    agg_flush_bytes: Optional[int] = typer.Option(None, help="trad batch size"),
    backend: Optional[str] = typer.Option(None),
    config: Optional[Path] = typer.Option(None, help="rendezvous key=value file"),
    out: Optional[Path] = typer.Option(None, help="CSV file instead of stdout"),
):
    """Call throughput between two machines for each invocation path."""
    with cli_errors():
        settings = load_settings(config, backend=backend, agg_flush_bytes=agg_flush_bytes)
        mode_list = parse_option("modes", parse_modes, modes)
        rows = invoke_rows(settings, parse_option("sizes", parse_size_range, sizes), mode_list, count, repeat)
        emit(rows, InvokeRow, out)
