# In fabricrpc/aggregator.py

import logging
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from .exceptions import AllocationError, DrainTimeoutError, FabricError, SerializationError
from .fabric.calls import RemoteCalls
from .fabric.serialization import record_size, serialize_into
from .fabric.sync import SyncGroup
from .regmem import WOULD_BLOCK, GeneralAllocator, RegisteredMemory
from .utils import Backoff, spin_until

if TYPE_CHECKING:
    from .fabric.system import ThreadContext

log = logging.getLogger(__name__)

MODES = ("trad", "ovfl")


@dataclass(slots=True)
class Batch:
    """Serialized records waiting for one channel transfer."""

    mem: RegisteredMemory
    used: int = 0
    syncs: list = field(default_factory=list)
    exceeding: bool = False
    opened: float = 0.0

    def sync(self):
        if not self.syncs:
            return None
        return self.syncs[0] if len(self.syncs) == 1 else SyncGroup(self.syncs)


class Aggregator(RemoteCalls):
    """
    Batches a thread's calls before they reach its channels.

    trad: records are serialized into a per-destination staging buffer of
    `agg_flush_bytes`; a full buffer becomes one channel transfer.

    ovfl: records go straight into the channel; only when the channel refuses
    are they serialized into exceeding memory, which is drained FIFO ahead of
    any newer record for that destination.

    Records are serialized exactly once, into the memory they are transferred from.
    """

    def __init__(self, ctx: "ThreadContext", mode: str = "ovfl"):
        if mode not in MODES:
            raise FabricError(f"unknown aggregation mode '{mode}'", code="unknown_path")
        super().__init__(ctx)
        s = ctx.settings
        self.mode = mode
        self.path = mode
        self.flush_bytes = s.agg_flush_bytes
        self.exceed_cap = s.agg_exceed_cap
        self.idle_flush = s.agg_idle_flush_ms / 1000.0
        self.stats: Counter = Counter()
        self.exceed_bytes = 0
        self._staging: dict[int, Batch] = {}
        self._pending: dict[int, deque[Batch]] = {}
        self._to_free: deque[Batch] = deque()
        self._exceed_mem: Optional[GeneralAllocator] = None
        self._drainer: Optional[threading.Thread] = None
        self._drainer_stop = threading.Event()
        self._drainer_ready = threading.Event()
        if ctx.attached:
            self.start()

    def __repr__(self) -> str:
        return (f"Aggregator({self.mode}, t{self.ctx.tid.flat}, pending={self.pending_batches}, "
                f"exceeding={self.exceed_bytes})")

    # --- Accepting calls ---

    def _submit(self, dest, function_id, context, payload, sync) -> bool:
        size = record_size(len(context), None if payload is None else len(payload))
        with self.ctx.channel_lock:
            if self.mode == "trad":
                return self._stage(dest.flat, size, function_id, context, payload, sync)
            return self._pass_through(dest.flat, size, function_id, context, payload, sync)

    def _accepted(self, view, function_id, context, payload) -> None:
        serialize_into(view, 0, function_id, context, payload)
        self.stats["serialized"] += 1
        self.ctx.system.inflight.fetch_add(1)

    def _stage(self, dest: int, size: int, function_id, context, payload, sync) -> bool:
        if size > self.flush_bytes:
            raise SerializationError(f"record of {size} bytes exceeds the {self.flush_bytes}-byte batch")
        batch = self._staging.get(dest)
        if batch is not None and batch.used + size > self.flush_bytes:
            self._close(dest)
            self._drain(dest)
            batch = None
        if batch is None:
            seg = self.ctx.process.segment(self.flush_bytes)
            if seg is WOULD_BLOCK:
                self.stats["staging_blocked"] += 1
                return False
            batch = self._staging[dest] = Batch(seg, opened=time.monotonic())
        self._accepted(batch.mem.view(batch.used, size), function_id, context, payload)
        batch.used += size
        if sync is not None:
            batch.syncs.append(sync)
        if batch.used == self.flush_bytes:
            self._close(dest)
            self._drain(dest)
        return True

    def _pass_through(self, dest: int, size: int, function_id, context, payload, sync) -> bool:
        if self._pending.get(dest):
            self._drain(dest)
        if not self._pending.get(dest):
            channel = self.ctx.messenger.get(dest)
            res = channel.try_reserve(size)
            if res is not None:
                try:
                    self._accepted(res.view, function_id, context, payload)
                except BaseException:
                    self.ctx.process.free_segment(res.local)
                    raise
                try:
                    channel.commit(res, sync)
                except BaseException:
                    self.ctx.system.inflight.fetch_sub(1)
                    raise
                self.stats["transfers"] += 1
                return True
        return self._exceed(dest, size, function_id, context, payload, sync)

    def _exceed(self, dest: int, size: int, function_id, context, payload, sync) -> bool:
        if self.exceed_bytes + size > self.exceed_cap:
            self.stats["exceed_refused"] += 1
            return False
        if self._exceed_mem is None:
            process = self.ctx.process
            self._exceed_mem = GeneralAllocator(process.machine, process.zone, self.exceed_cap)
        try:
            mem = self._exceed_mem.alloc(size)
        except AllocationError:
            self.stats["exceed_refused"] += 1
            return False
        self.exceed_bytes += mem.length
        self._accepted(mem.view(0, size), function_id, context, payload)
        self._pending.setdefault(dest, deque()).append(
            Batch(mem, size, [sync] if sync is not None else [], exceeding=True))
        self.stats["exceeding"] += 1
        return True

    # --- Moving batches to channels ---

    def _close(self, dest: int) -> None:
        batch = self._staging.pop(dest, None)
        if batch is None:
            return
        if not batch.used:
            self.ctx.process.free_segment(batch.mem)
            return
        self._pending.setdefault(dest, deque()).append(batch)

    def _drain(self, dest: int) -> int:
        queue = self._pending.get(dest)
        if not queue:
            return 0
        channel = self.ctx.messenger.get(dest)
        n = 0
        while queue:
            batch = queue[0]
            if not channel.send_registered(batch.mem, batch.used, batch.sync()):
                break
            queue.popleft()
            n += 1
            if batch.exceeding:
                self._to_free.append(batch)
        self.stats["transfers"] += n
        return n

    def _reclaim(self) -> None:
        oracle = self.ctx.process.transmitters
        while self._to_free and self._to_free[0].mem.is_free(oracle):
            batch = self._to_free.popleft()
            self.exceed_bytes -= batch.mem.length
            self._exceed_mem.free(batch.mem)

    def progress(self) -> int:
        """Retry pending batches; close staging buffers left idle past the idle timeout."""
        with self.ctx.channel_lock:
            self._reclaim()
            if self.idle_flush:
                now = time.monotonic()
                for dest in [d for d, b in self._staging.items() if now - b.opened >= self.idle_flush]:
                    self._close(dest)
                    self.stats["idle_flushes"] += 1
            return sum(self._drain(dest) for dest in list(self._pending))

    def push(self) -> int:
        """Close every staging buffer and hand whatever the channels accept. Never blocks."""
        with self.ctx.channel_lock:
            for dest in list(self._staging):
                self._close(dest)
            return self.progress()

    def agg_flush(self, dest: Optional[int] = None, timeout: Optional[float] = None) -> None:
        """Hand every staged and exceeding record for `dest` (or all destinations) to the channels."""
        targets = list(self._staging) + list(self._pending) if dest is None else [self.ctx.system.resolve(dest).flat]
        with self.ctx.channel_lock:
            for d in targets:
                self._close(d)
                self._drain(d)
        self.stats["flushes"] += 1

        def drained() -> bool:
            with self.ctx.channel_lock:
                return not any(self._pending.get(d) for d in targets)

        def step() -> int:
            return self.progress() or self.ctx.progress()

        timeout = self.ctx.settings.finalize_timeout if timeout is None else timeout
        if not spin_until(drained, timeout, on_idle=step):
            raise DrainTimeoutError(f"{self!r}: batches not accepted within {timeout}s")

    agg_call = RemoteCalls.call

    @property
    def pending_batches(self) -> int:
        return sum(len(q) for q in self._pending.values())

    @property
    def empty(self) -> bool:
        return not self._staging and not any(self._pending.values())

    # --- Drainer helper ---

    def start(self) -> None:
        if not self.ctx.settings.agg_helper or (self._drainer is not None and self._drainer.is_alive()):
            return
        self._drainer_stop.clear()
        self._drainer_ready.clear()
        self._drainer = threading.Thread(target=self._drain_loop, name=f"agg-{self.mode}-{self.ctx.tid.flat}",
                                         daemon=True)
        self._drainer.start()
        self.ctx.owners.add(self._drainer.ident)
        self._drainer_ready.set()

    def stop(self) -> None:
        self._drainer_stop.set()
        if self._drainer is not None and self._drainer is not threading.current_thread():
            self._drainer.join(timeout=2.0)
        self._drainer = None

    def _drain_loop(self) -> None:
        backoff = Backoff()
        self._drainer_ready.wait()
        while not self._drainer_stop.is_set():
            try:
                moved = self.progress()
            except FabricError:
                log.exception("%r: drainer failed", self)
                return
            if moved:
                backoff.reset()
            else:
                backoff.wait()
