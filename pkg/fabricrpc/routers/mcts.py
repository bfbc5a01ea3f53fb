# In fabricrpc/routers/mcts.py

import logging
from pathlib import Path
from typing import Optional

import typer

from ..config import Settings
from ..console import cli_errors, emit, load_settings, parse_option
from ..fabric.system import SystemContext
from ..games import HexGame
from ..mcts import Search
from ..schemas import MctsRow, PhaseReport, Placement

log = logging.getLogger(__name__)

router = typer.Typer()


def run_search(settings: Settings, phases: int, *, play: bool = False,
               time_limit: Optional[float] = None) -> list[PhaseReport]:
    system = SystemContext(settings)
    try:
        search = Search(system, HexGame(settings.hex_n))
        if play:
            return search.play(phases, time_limit=time_limit)
        return [search.run_phase(time_limit=time_limit) for _ in range(phases)]
    finally:
        system.shutdown()


def mcts_rows(settings: Settings, placement: Placement, phases: int, *, play: bool = False,
              time_limit: Optional[float] = None) -> list[MctsRow]:
    settings = settings.replace(machines=placement.machines, processes_per_machine=placement.processes,
                                threads_per_process=placement.threads)
    return [
        MctsRow(config=str(placement), phase=r.phase, visits=r.root_visits, completions=r.completions,
                rollouts_per_sec=round(r.rollouts_per_sec, 1))
        for r in run_search(settings, phases, play=play, time_limit=time_limit)
    ]


@router.command("mcts")
def mcts(
    placement: str = typer.Option("1x1x1", help="machines x processes x threads, e.g. 2x2x2"),
    phases: int = typer.Option(1, min=1),
    rollouts: Optional[int] = typer.Option(None, help="rollouts per phase per thread"),
    sims: Optional[int] = typer.Option(None, help="random playouts per simulation request"),
    hex_n: Optional[int] = typer.Option(None, help="hex board side"),
    remote_only: bool = typer.Option(False, "--remote-only", help="never use the same-process shortcut"),
    play: bool = typer.Option(False, "--play", help="commit the most visited move between phases"),
    agg_mode: Optional[str] = typer.Option(None, help="trad or ovfl"),
    backend: Optional[str] = typer.Option(None, help="inproc or stream"),
    time_limit: Optional[float] = typer.Option(None, min=0, help="seconds after which a phase stops starting rollouts"),
    seed: Optional[int] = typer.Option(None),
    config: Optional[Path] = typer.Option(None, help="rendezvous key=value file"),
    out: Optional[Path] = typer.Option(None, help="CSV file instead of stdout"),
):
    """Distributed Hex search over a simulated placement."""
    with cli_errors():
        where = parse_option("placement", Placement.parse, placement)
        settings = load_settings(config, rollouts_per_phase_per_thread=rollouts, sims_per_request=sims,
                                 hex_n=hex_n, mcts_remote_only=remote_only or None, agg_mode=agg_mode,
                                 backend=backend, seed=seed)
        emit(mcts_rows(settings, where, phases, play=play, time_limit=time_limit), MctsRow, out)
