# In fabricrpc/verbs/types.py

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional


class Opcode(IntEnum):
    SEND = 1
    RECV = 2
    WRITE = 3
    READ = 4


class Status(IntEnum):
    OK = 0
    FAULT = 1


@dataclass(slots=True, eq=False)
class MemoryRegion:
    machine: int
    region_id: int
    base: int
    length: int
    zone: int
    buffer: bytearray = field(repr=False)

    def contains(self, offset: int, length: int) -> bool:
        return 0 <= offset and length >= 0 and offset + length <= self.length


@dataclass(slots=True, frozen=True)
class LocalSlice:
    region_id: int
    offset: int
    length: int


@dataclass(slots=True, frozen=True)
class RemoteTarget:
    region_id: int
    offset: int


@dataclass(slots=True)
class WorkRequest:
    op: Opcode
    local: Optional[LocalSlice] = None
    remote: Optional[RemoteTarget] = None
    signaled: bool = False
    user_tag: int = 0

    @property
    def length(self) -> int:
        return self.local.length if self.local is not None else 0

    @property
    def is_noop(self) -> bool:
        return self.op == Opcode.WRITE and self.remote is None and self.length == 0

    @classmethod
    def noop(cls, user_tag: int = 0) -> "WorkRequest":
        """Zero-length signaled write with no target, used as a completion fence."""
        return cls(Opcode.WRITE, signaled=True, user_tag=user_tag)


@dataclass(slots=True, frozen=True)
class CompletionEntry:
    qp_id: int
    user_tag: int
    status: Status = Status.OK
    opcode: Opcode = Opcode.WRITE
    byte_len: int = 0
    seq: int = -1
    signal_index: int = -1


@dataclass(slots=True, frozen=True)
class PostReceipt:
    """`epoch` is the signal epoch that covers the request."""
    seq: int
    epoch: int
    signaled: bool
