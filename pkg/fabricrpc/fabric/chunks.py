# In fabricrpc/fabric/chunks.py
#
# Chunk header (64 bytes, then record data):
#   @0  Producer: first_offset u64, last_offset u64, grow index u32, grow count u32, seal u64
#   @32 Consumer: consumed_offset u64
#   @40 first chunk only: sender flat u32, ack region u32, ack offset u64, ack machine u32
# Producer is written only by the sender's one-sided writes, Consumer only by the receiver.

import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from ..regmem import RegisteredMemory, RemoteMemoryLocator

PRODUCER = struct.Struct("<QQII")
SEAL = struct.Struct("<Q")
SEAL_AT = 24
CONSUMER = struct.Struct("<Q")
CONSUMER_AT = 32
SENDER = struct.Struct("<IIQI")
SENDER_AT = 40
CHUNK_HEADER = 64

ACK = struct.Struct("<Q")
CHUNK_ALLOC_ARGS = struct.Struct("<IIII")  # dest thread, sender flat, count, chunk size
REMOTE_ALLOC_ARGS = struct.Struct("<IQ")  # dest thread, length


def seal_word(lap_start: int) -> int:
    """Seal value for the lap that began at global offset `lap_start`; never matches another lap."""
    return (lap_start << 1) | 1


@dataclass(slots=True)
class ChunkGrant:
    sender: int
    chunks: list[RegisteredMemory]
    setup: bool = False
    ack: Optional[RemoteMemoryLocator] = None


@dataclass(slots=True)
class _SenderGrants:
    setup: Optional[ChunkGrant] = None
    grows: deque = field(default_factory=deque)


class IncomingMemoryMap:
    """Chunks granted to one receiving thread, keyed by sender flat id.

    Written by service threads, read by the receiving thread.
    """

    def __init__(self):
        self._by_sender: dict[int, _SenderGrants] = {}
        self._new: deque[int] = deque()
        self._lock = threading.Lock()

    def publish(self, grant: ChunkGrant) -> None:
        with self._lock:
            entry = self._by_sender.setdefault(grant.sender, _SenderGrants())
            if grant.setup:
                entry.setup = grant
                self._new.append(grant.sender)
            else:
                entry.grows.append(grant)

    def new_channels(self) -> list[ChunkGrant]:
        out = []
        with self._lock:
            while self._new:
                entry = self._by_sender[self._new.popleft()]
                if entry.setup is not None:
                    out.append(entry.setup)
                    entry.setup = None
        return out

    def take_grow(self, sender: int) -> Optional[ChunkGrant]:
        with self._lock:
            entry = self._by_sender.get(sender)
            if entry is None or not entry.grows:
                return None
            return entry.grows.popleft()

    def __len__(self) -> int:
        return len(self._by_sender)


def write_sender_info(chunk: RegisteredMemory, sender: int, ack: RemoteMemoryLocator) -> None:
    SENDER.pack_into(chunk.region.buffer, chunk.offset + SENDER_AT, sender, ack.region_id, ack.offset, ack.machine)


def read_sender_info(chunk: RegisteredMemory) -> tuple[int, RemoteMemoryLocator]:
    sender, region, offset, machine = SENDER.unpack_from(chunk.region.buffer, chunk.offset + SENDER_AT)
    return sender, RemoteMemoryLocator(machine, region, offset, ACK.size)
