# In fabricrpc/fabric/registry.py

import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import TYPE_CHECKING, Callable, Optional

from ..exceptions import RegistryError

if TYPE_CHECKING:
    from .system import ThreadContext, ThreadId

SYSTEM_BASE = 0xFFFF_FFFF_0000_0000
MAX_FUNCTION_ID = (1 << 64) - 1


class SysFn(IntEnum):
    NOTIFYING = SYSTEM_BASE + 1
    RETURN = SYSTEM_BASE + 2
    FETCH = SYSTEM_BASE + 3
    WRITTEN = SYSTEM_BASE + 4
    BCAST = SYSTEM_BASE + 5
    SHUTDOWN = SYSTEM_BASE + 6
    NOTIFY = SYSTEM_BASE + 7
    CHUNK_ALLOC = SYSTEM_BASE + 8
    REPLY = SYSTEM_BASE + 9
    REMOTE_ALLOC = SYSTEM_BASE + 10


@dataclass(slots=True)
class Invocation:
    """What a registered function receives. `payload` is only valid during the call."""
    ctx: "ThreadContext"
    src: "ThreadId"
    function_id: int
    context: bytes
    payload: Optional[memoryview] = None


Handler = Callable[[Invocation], Optional[bytes]]


@dataclass(slots=True, frozen=True)
class FunctionEntry:
    function_id: int
    fn: Handler
    name: str


class FunctionRegistry:
    """Explicit u64 function ids. Writable until the first communication, then read-only."""

    def __init__(self):
        self._entries: dict[int, FunctionEntry] = {}
        self._frozen = False
        self._lock = threading.Lock()

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        self._frozen = True

    def register(self, function_id: int, fn: Handler, name: Optional[str] = None) -> FunctionEntry:
        if not 0 <= function_id < SYSTEM_BASE:
            raise RegistryError(f"function id {function_id:#x} is outside the application range")
        with self._lock:
            if self._frozen:
                raise RegistryError(f"cannot register {function_id:#x}: registry is frozen")
            if function_id in self._entries:
                raise RegistryError(f"function id {function_id:#x} is already registered")
            entry = FunctionEntry(function_id, fn, name or getattr(fn, "__name__", "fn"))
            self._entries[function_id] = entry
        return entry

    def function(self, function_id: int, name: Optional[str] = None):
        """Decorator form of `register`."""
        def wrap(fn: Handler) -> Handler:
            self.register(function_id, fn, name)
            return fn
        return wrap

    def lookup(self, function_id: int) -> FunctionEntry:
        try:
            return self._entries[function_id]
        except KeyError:
            raise RegistryError(f"function id {function_id:#x} is not registered") from None

    def __contains__(self, function_id: int) -> bool:
        return function_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)
