# In fabricrpc/routers/transport.py

import logging
import time
from pathlib import Path
from statistics import mean
from typing import Optional

import typer

from ..config import Settings
from ..console import cli_errors, emit, load_settings, parse_option
from ..exceptions import DrainTimeoutError
from ..regmem import RegisteredMemory, RemoteMemoryLocator
from ..schemas import TransportRow
from ..transmitter import Transmitter
from ..utils import Backoff, parse_size_range
from ..verbs import Cluster, LocalSlice, Opcode, QueuePair, RemoteTarget, WorkRequest

log = logging.getLogger(__name__)

router = typer.Typer()

MODES = ("raw", "raw+auto")


def _pair(settings: Settings, size: int) -> tuple[Cluster, QueuePair, RegisteredMemory, RemoteMemoryLocator]:
    cluster = Cluster.from_settings(settings, machines=2)
    src = cluster.machine(0).register_memory(0, size)
    dst = cluster.machine(1).register_memory(0, size)
    qp, _ = cluster.connect(0, 1)
    return cluster, qp, RegisteredMemory(src, 0, size), RemoteMemoryLocator(1, dst.region_id, 0, size)


def _wait_completion(cluster: Cluster, qp: QueuePair, timeout: float) -> None:
    deadline = time.monotonic() + timeout
    backoff = Backoff()
    while not qp.send_cq.poll(1):
        if time.monotonic() > deadline:
            raise DrainTimeoutError(f"qp {qp.qp_id}: no completion within {timeout}s")
        if cluster.delivery == "deferred":
            cluster.progress()
        backoff.wait()


def run_raw(settings: Settings, size: int, count: int) -> tuple[float, int]:
    """Writes posted straight on the queue pair, signaling every u_max-th by hand."""
    cluster, qp, local, remote = _pair(settings, size)
    try:
        started = time.perf_counter()
        for i in range(count):
            signaled = (i + 1) % qp.u_max == 0 or i == count - 1
            qp.post(WorkRequest(Opcode.WRITE, LocalSlice(local.region.region_id, 0, size),
                                RemoteTarget(remote.region_id, 0), signaled=signaled))
            if signaled:
                _wait_completion(cluster, qp, settings.finalize_timeout)
        elapsed = time.perf_counter() - started
        return elapsed, cluster.machine(0).device.stats["bytes_written"]
    finally:
        cluster.close()


def run_auto(settings: Settings, size: int, count: int) -> tuple[float, int]:
    """The same writes through a transmitter, which decides the signaling itself."""
    cluster, qp, local, remote = _pair(settings, size)
    tx = Transmitter(qp)
    try:
        started = time.perf_counter()
        for _ in range(count):
            ticket = tx.write(local, remote)
            if not ticket.ok:
                raise DrainTimeoutError(f"transmit failed: {ticket.detail}")
        tx.flush(settings.finalize_timeout)
        elapsed = time.perf_counter() - started
        return elapsed, cluster.machine(0).device.stats["bytes_written"]
    finally:
        cluster.close()


RUNNERS = {"raw": run_raw, "raw+auto": run_auto}


def transport_rows(settings: Settings, sizes: list[int], count: int, repeat: int = 3) -> list[TransportRow]:
    rows = []
    for size in sizes:
        for mode in MODES:
            runs = [RUNNERS[mode](settings, size, count) for _ in range(repeat)]
            elapsed = mean(r[0] for r in runs)
            moved = runs[-1][1]
            rate = count / elapsed if elapsed > 0 else 0.0
            rows.append(TransportRow(mode=mode, size=size, count=count, bytes=moved,
                                     msgs_per_sec=round(rate, 1), MB_per_sec=round(rate * size / 1e6, 3)))
            log.info("transport %s size=%d: %.0f msg/s", mode, size, rate)
    return rows


@router.command("transport")
def transport(
    sizes: str = typer.Option("8..65536", help="'lo..hi' (powers of two) or a comma list"),
    count: int = typer.Option(10000, min=1, help="writes per measurement"),
    repeat: int = typer.Option(3, min=1, help="measurements averaged per row"),
    backend: Optional[str] = typer.Option(None, help="inproc or stream"),
    delivery: Optional[str] = typer.Option(None, help="eager or deferred"),
    config: Optional[Path] = typer.Option(None, help="rendezvous key=value file"),
    out: Optional[Path] = typer.Option(None, help="CSV file instead of stdout"),
):
    """Raw queue-pair writes with manual signaling against the transmitter's automatic signaling."""
    with cli_errors():
        settings = load_settings(config, backend=backend, delivery=delivery)
        rows = transport_rows(settings, parse_option("sizes", parse_size_range, sizes), count, repeat)
        emit(rows, TransportRow, out)
