# In fabricrpc/config.py

from pathlib import Path
from typing import Literal

from dotenv import dotenv_values
from pydantic import ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ConfigError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="FABRIC_", env_file=".env", extra="ignore")

    # Placement
    machines: int = 1
    processes_per_machine: int = 1
    threads_per_process: int = 2
    zones_per_machine: int = 2

    # Transport
    backend: Literal["inproc", "stream"] = "inproc"
    delivery: Literal["eager", "deferred"] = "eager"
    u_max: int = 64
    cq_depth: int = 4096
    registration_cap: int = 1 << 30
    split_writes: bool = False

    # Registered memory
    slab_size: int = 1 << 20
    unit_size: int = 64 << 10
    ring_initial: int = 4
    ring_growth: Literal["none", "linear", "exponential"] = "exponential"
    ring_max: int = 64
    debug_ownership: bool = True

    # Send-based path
    recv_buffers: int = 256
    recv_buffer_size: int = 8192
    broadcast_arity: int = 2
    handling_mode: Literal["direct", "helper"] = "direct"
    finalize_timeout: float = 10.0

    # One-sided channels
    chunk_size: int = 64 << 10
    c: int = 2
    c_max: int = 16
    consumed_pull_threshold: int = 0  # 0 = push only

    # Aggregation
    agg_mode: Literal["trad", "ovfl"] = "ovfl"
    agg_flush_bytes: int = 4096
    agg_exceed_cap: int = 1 << 20
    agg_idle_flush_ms: int = 0
    agg_helper: bool = False

    # Search
    rollouts_per_phase_per_thread: int = 4096
    sims_per_request: int = 16
    ucb_c: float = 1.414
    hex_n: int = 7
    mcts_remote_only: bool = False

    seed: int = 0
    log_level: str = "WARNING"

    @model_validator(mode="after")
    def check_ranges(self) -> "Settings":
        for name in ("machines", "processes_per_machine", "threads_per_process",
                     "zones_per_machine", "u_max", "ring_initial", "c",
                     "recv_buffers", "broadcast_arity", "sims_per_request", "hex_n"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.c_max < max(self.c, 2):
            raise ValueError("c_max must be >= c and >= 2")
        if self.ring_max < self.ring_initial:
            raise ValueError("ring_max must be >= ring_initial")
        if self.chunk_size % 8 or self.chunk_size < 256:
            raise ValueError("chunk_size must be a multiple of 8 and >= 256")
        if self.unit_size > self.slab_size or self.chunk_size > self.slab_size:
            raise ValueError("unit_size and chunk_size must fit in one slab")
        if self.recv_buffer_size % 8 or self.recv_buffer_size < 64:
            raise ValueError("recv_buffer_size must be a multiple of 8 and >= 64")
        if self.agg_flush_bytes < 64 or self.agg_flush_bytes > min(self.unit_size, self.chunk_size - 64):
            raise ValueError("agg_flush_bytes must be >= 64 and fit one scratch unit and one chunk")
        if self.hex_n > 25:
            raise ValueError("hex_n must be <= 25")
        return self

    @property
    def n_threads(self) -> int:
        return self.machines * self.processes_per_machine * self.threads_per_process

    @classmethod
    def build(cls, **overrides) -> "Settings":
        """Construct with overrides, turning validation failures into ConfigError."""
        try:
            return cls(**overrides)
        except ValidationError as e:
            raise ConfigError(_first_error(e)) from e

    @classmethod
    def from_rendezvous(cls, path: str | Path, **overrides) -> "Settings":
        """Read a `key=value` rendezvous file; explicit overrides win."""
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"rendezvous file '{path}' not found")
        values = {k.lower(): v for k, v in dotenv_values(path).items() if v is not None}
        values.update(overrides)
        return cls.build(**values)

    def replace(self, **overrides) -> "Settings":
        return self.build(**{**self.model_dump(), **overrides})


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    where = ".".join(str(p) for p in err.get("loc", ())) or "settings"
    return f"{where}: {err.get('msg', 'invalid value')}"


settings = Settings()
