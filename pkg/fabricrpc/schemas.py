# In fabricrpc/schemas.py

import re
from typing import List, Optional

from pydantic import BaseModel, Field, field_validator

PLACEMENT_RE = re.compile(r"^\s*(\d+)\s*[xX]\s*(\d+)\s*[xX]\s*(\d+)\s*$")


#####################################################################
# Transport

class QueuePairConfig(BaseModel):
    u_max: int = Field(64, ge=1)
    allow_duplicate: bool = True


#####################################################################
# Placement

class Placement(BaseModel):
    machines: int = Field(ge=1)
    processes: int = Field(ge=1)
    threads: int = Field(ge=1)

    @classmethod
    def parse(cls, text: str) -> "Placement":
        match = PLACEMENT_RE.match(text or "")
        if not match:
            raise ValueError(f"placement '{text}' is not of the form MxPxT")
        m, p, t = (int(g) for g in match.groups())
        return cls(machines=m, processes=p, threads=t)

    @property
    def n_threads(self) -> int:
        return self.machines * self.processes * self.threads

    def __str__(self) -> str:
        return f"{self.machines}x{self.processes}x{self.threads}"


#####################################################################
# Bench rows. Field order is the CSV column order.

class TransportRow(BaseModel):
    mode: str
    size: int
    count: int
    bytes: int
    msgs_per_sec: float
    MB_per_sec: float


class InvokeRow(BaseModel):
    mode: str
    size: int
    calls: int
    calls_per_sec: float
    MB_per_sec: float


class MctsRow(BaseModel):
    config: str
    phase: int
    visits: int
    completions: int
    rollouts_per_sec: float


#####################################################################
# Search

class PhaseReport(BaseModel):
    phase: int
    cap: int
    rollouts: int
    root_visits: int
    completions: int
    nodes: int
    elapsed: float
    visits_per_thread: List[int] = []
    completions_per_thread: List[int] = []
    best_move: Optional[int] = None

    @field_validator("elapsed")
    @classmethod
    def non_negative(cls, v: float) -> float:
        return max(v, 0.0)

    @property
    def rollouts_per_sec(self) -> float:
        return self.rollouts / self.elapsed if self.elapsed > 0 else 0.0
