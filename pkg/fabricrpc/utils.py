# In fabricrpc/utils.py

import csv
import logging
import threading
import time
from collections import deque
from typing import Callable, Generic, Iterable, Optional, TextIO, Type, TypeVar

from pydantic import BaseModel
from rich.logging import RichHandler

T = TypeVar("T")


# --- Logging ---

def setup_logging(level: str = "WARNING") -> None:
    """Route library logging through rich. Called once by the CLI."""
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True,
    )


# --- Atomics ---

class AtomicCounter:
    """
    A single-word atomic integer.

    The internal lock stands in for the hardware instruction; it is held only
    for the duration of one operation, never across protocol steps.
    """

    __slots__ = ("_value", "_lock")

    def __init__(self, initial: int = 0) -> None:
        self._value = initial
        self._lock = threading.Lock()

    def load(self) -> int:
        return self._value

    def store(self, value: int) -> None:
        with self._lock:
            self._value = value

    def fetch_add(self, delta: int = 1) -> int:
        with self._lock:
            old = self._value
            self._value = old + delta
            return old

    def fetch_sub(self, delta: int = 1) -> int:
        return self.fetch_add(-delta)

    def exchange(self, value: int) -> int:
        with self._lock:
            old = self._value
            self._value = value
            return old

    def compare_and_set(self, expected: int, desired: int) -> bool:
        with self._lock:
            if self._value != expected:
                return False
            self._value = desired
            return True

    def max_update(self, candidate: int) -> bool:
        """Raise the value to `candidate` if larger. True if this call raised it."""
        while True:
            current = self._value
            if current >= candidate:
                return False
            if self.compare_and_set(current, candidate):
                return True

    def __repr__(self) -> str:
        return f"AtomicCounter({self._value})"


class MpscQueue(Generic[T]):
    """Multi-producer single-consumer FIFO. deque append/popleft are atomic."""

    __slots__ = ("_items",)

    def __init__(self) -> None:
        self._items: deque = deque()

    def push(self, item: T) -> None:
        self._items.append(item)

    def pop(self) -> Optional[T]:
        try:
            return self._items.popleft()
        except IndexError:
            return None

    def drain(self, budget: int) -> list:
        out = []
        while len(out) < budget:
            try:
                out.append(self._items.popleft())
            except IndexError:
                break
        return out

    def __len__(self) -> int:
        return len(self._items)

    def __bool__(self) -> bool:
        return bool(self._items)


# --- Waiting ---

class Backoff:
    """Spin a few times, then yield, then sleep with a capped exponential delay."""

    def __init__(self, spins: int = 16, max_sleep: float = 0.002) -> None:
        self.spins = spins
        self.max_sleep = max_sleep
        self._count = 0

    def reset(self) -> None:
        self._count = 0

    def wait(self) -> None:
        self._count += 1
        if self._count <= self.spins:
            time.sleep(0)
            return
        delay = min(self.max_sleep, 0.00005 * (2 ** min(self._count - self.spins, 10)))
        time.sleep(delay)


def spin_until(predicate: Callable[[], bool], timeout: Optional[float] = None,
               on_idle: Optional[Callable[[], object]] = None) -> bool:
    """Poll `predicate` with backoff. Returns False on timeout."""
    deadline = None if timeout is None else time.monotonic() + timeout
    backoff = Backoff()
    while not predicate():
        if deadline is not None and time.monotonic() > deadline:
            return False
        if on_idle is not None and on_idle():
            backoff.reset()
            continue
        backoff.wait()
    return True


# --- Misc ---

def align_up(value: int, alignment: int = 8) -> int:
    return (value + alignment - 1) & ~(alignment - 1)


def parse_size_range(text: str) -> list[int]:
    """'8..65536' -> powers of two in range; '8,64,256' -> explicit list."""
    text = text.strip()
    if ".." in text:
        low_s, high_s = text.split("..", 1)
        low, high = int(low_s), int(high_s)
        if low <= 0 or high < low:
            raise ValueError(f"invalid size range '{text}'")
        sizes, size = [], low
        while size <= high:
            sizes.append(size)
            size *= 2
        return sizes
    sizes = [int(part) for part in text.split(",") if part.strip()]
    if not sizes or any(size <= 0 for size in sizes):
        raise ValueError(f"invalid size list '{text}'")
    return sizes


def write_csv(rows: Iterable[BaseModel], model: Type[BaseModel], out: TextIO) -> None:
    """Header row always present; column order is the model's field order."""
    writer = csv.DictWriter(out, fieldnames=list(model.model_fields))
    writer.writeheader()
    for row in rows:
        writer.writerow(row.model_dump())
