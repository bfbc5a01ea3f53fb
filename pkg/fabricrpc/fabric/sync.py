# In fabricrpc/fabric/sync.py

import struct
import threading
import time
from enum import Enum
from typing import Callable, Iterable, Optional

from ..exceptions import FabricError
from ..regmem import RegisteredMemory
from ..utils import AtomicCounter, Backoff

SLOT = struct.Struct("<Q")
SLOT_OK = 1
SLOT_FAILED = 2


class SyncMode(str, Enum):
    ON_TRANSMIT = "on_transmit"
    ON_REMOTE_CONSUME = "on_remote_consume"


class Synchronizer:
    """Counting semaphore attached to outgoing calls.

    Each attached call adds one; each completion event of the chosen mode
    removes one. With `slots`, remote consumers report by writing a status word
    into a registered slot instead of sending a notification.
    """

    def __init__(self, mode: SyncMode = SyncMode.ON_TRANSMIT, *, slots: Optional[RegisteredMemory] = None):
        self.mode = SyncMode(mode)
        self.slots = slots
        self.sync_id = 0
        self._counter = AtomicCounter()
        self.increments = AtomicCounter()
        self.decrements = AtomicCounter()
        self.failures = AtomicCounter()
        self._reserved: set[int] = set()
        self._next_slot = 0
        self._slot_lock = threading.Lock()

    @property
    def count(self) -> int:
        return self._counter.load()

    @property
    def done(self) -> bool:
        if self.slots is not None:
            self.collect()
        return self._counter.load() <= 0

    def add(self, n: int = 1) -> None:
        self._counter.fetch_add(n)
        self.increments.fetch_add(n)

    def cancel(self, n: int = 1) -> None:
        """Withdraw calls that were attached but never accepted."""
        self._counter.fetch_sub(n)
        self.increments.fetch_sub(n)

    def notify(self, ok: bool = True, n: int = 1) -> None:
        if not ok:
            self.failures.fetch_add(n)
        self.decrements.fetch_add(n)
        self._counter.fetch_sub(n)

    # --- Write-back slots ---

    @property
    def capacity(self) -> int:
        return self.slots.length // SLOT.size if self.slots is not None else 0

    def reserve_slot(self) -> int:
        with self._slot_lock:
            for _ in range(self.capacity):
                index = self._next_slot
                self._next_slot = (self._next_slot + 1) % self.capacity
                if index not in self._reserved:
                    self._reserved.add(index)
                    return index
        raise FabricError("every notification slot of the synchronizer is in use", code="sync_slots")

    def release_slot(self, index: int) -> None:
        with self._slot_lock:
            self._reserved.discard(index)

    def slot_locator(self, index: int):
        return self.slots.locator(index * SLOT.size, SLOT.size)

    def collect(self) -> int:
        """Turn landed slot writes into notifications."""
        seen = 0
        with self._slot_lock:
            for index in list(self._reserved):
                value = SLOT.unpack_from(self.slots.region.buffer, self.slots.offset + index * SLOT.size)[0]
                if value:
                    SLOT.pack_into(self.slots.region.buffer, self.slots.offset + index * SLOT.size, 0)
                    self._reserved.discard(index)
                    self.notify(value == SLOT_OK)
                    seen += 1
        return seen

    def wait(self, timeout: Optional[float] = None, progress: Optional[Callable[[], object]] = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        backoff = Backoff()
        while not self.done:
            if deadline is not None and time.monotonic() > deadline:
                return False
            if progress is not None and progress():
                backoff.reset()
                continue
            backoff.wait()
        return True

    @property
    def balanced(self) -> bool:
        return self.increments.load() == self.decrements.load()

    def __repr__(self) -> str:
        return f"Synchronizer({self.mode.value}, count={self.count}, failures={self.failures.load()})"


class SyncGroup:
    """Several ON_TRANSMIT synchronizers released by one transfer."""

    __slots__ = ("members",)

    def __init__(self, members: Iterable[Synchronizer]):
        self.members = list(members)

    def notify(self, ok: bool = True) -> None:
        for sync in self.members:
            sync.notify(ok)
