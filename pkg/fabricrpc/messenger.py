# In fabricrpc/messenger.py

import logging
import threading
from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Union

from .exceptions import ChannelError, OwnershipError, SerializationError
from .fabric.calls import RemoteCalls, record
from .fabric.chunks import (
    ACK,
    CHUNK_ALLOC_ARGS,
    CHUNK_HEADER,
    CONSUMER,
    CONSUMER_AT,
    PRODUCER,
    SEAL,
    SEAL_AT,
    ChunkGrant,
    read_sender_info,
    seal_word,
)
from .fabric.registry import SysFn
from .fabric.serialization import peek_record, record_size, serialize_into
from .regmem import WOULD_BLOCK, RegisteredMemory, RemoteMemoryLocator
from .utils import spin_until

if TYPE_CHECKING:
    from .fabric.system import ThreadContext, ThreadId

log = logging.getLogger(__name__)


@dataclass(slots=True)
class ChunkRef:
    locator: RemoteMemoryLocator
    end_offset: int = 0  # global offset where the chunk's last lap ended


@dataclass(slots=True)
class Reservation:
    local: RegisteredMemory
    remote: RemoteMemoryLocator
    size: int

    @property
    def view(self) -> memoryview:
        return self.local.view(0, self.size)


class SenderChannel:
    """
    Sending half of a channel to one destination thread.

    Records are written by one-sided writes into chunks the destination
    granted. Whether a chunk may be reused is decided from the consumed offset
    the receiver pushes into `ack`; the sender never reads receiver state on
    the send path.
    """

    def __init__(self, ctx: "ThreadContext", dest: "ThreadId"):
        s = ctx.settings
        self.ctx = ctx
        self.dest = dest
        self.process = ctx.process
        self.tx = self.process.transmitter_for(dest)
        self.chunk_size = s.chunk_size
        self.capacity = s.chunk_size - CHUNK_HEADER
        self.c = s.c
        self.c_max = s.c_max
        self.pull_threshold = s.consumed_pull_threshold
        self.ack = self.process.arenas.zone_alloc(self.process.zone, ACK.size)
        self.ack.zero()
        self.cur = 0
        self.pos = 0
        self.produced = 0
        self.lap_start = 0
        self.closed = False
        self.stats: Counter = Counter()
        self._blocked_streak = 0
        self._pulled = 0
        self.ring = [ChunkRef(loc) for loc in self._request_chunks(self.c, setup=True)]
        log.info("%s: channel to %s set up with %d chunks", ctx.tid, dest, len(self.ring))

    def __repr__(self) -> str:
        return (f"SenderChannel({self.ctx.tid.flat}->{self.dest.flat}, chunks={len(self.ring)}, "
                f"produced={self.produced}, consumed={self.consumed})")

    # --- Chunk ring ---

    def _request_chunks(self, count: int, *, setup: bool) -> list[RemoteMemoryLocator]:
        args = CHUNK_ALLOC_ARGS.pack(self.dest.thread, self.ctx.tid.flat, count, self.chunk_size)
        if setup:
            args += self.ack.locator().pack()
        reply = self.process.request(self.dest.process_flat, SysFn.CHUNK_ALLOC, args,
                                     origin_thread=self.ctx.tid.flat)
        size = RemoteMemoryLocator.SIZE
        locs = [RemoteMemoryLocator.unpack(reply, i * size) for i in range(len(reply) // size)]
        self.stats["chunks"] += len(locs)
        return locs

    @property
    def consumed(self) -> int:
        pushed = ACK.unpack_from(self.ack.region.buffer, self.ack.offset)[0]
        return max(pushed, self._pulled)

    def ring_ids(self) -> list[tuple[int, int]]:
        return [(ref.locator.region_id, ref.locator.offset) for ref in self.ring]

    def _reusable(self, index: int) -> bool:
        end = self.ring[index].end_offset
        if self.consumed >= end:
            self._blocked_streak = 0
            return True
        self._blocked_streak += 1
        if self.pull_threshold and self._blocked_streak >= self.pull_threshold:
            self._pull(index)
            return self.consumed >= end
        return False

    def _pull(self, index: int) -> None:
        seg = self.process.segment(CONSUMER.size, wait=True)
        ticket = self.tx.read(seg, self.ring[index].locator.sub(CONSUMER_AT, CONSUMER.size))
        if not ticket.ok or not self.tx.wait_epoch(ticket.epoch, self.ctx.settings.finalize_timeout):
            raise ChannelError(f"{self!r}: pulling the consumed offset failed")
        self._pulled = max(self._pulled, CONSUMER.unpack(seg.read(0, CONSUMER.size))[0])
        self._blocked_streak = 0
        self.stats["pulls"] += 1

    def _advance(self) -> bool:
        """Seal the current chunk and move to the next, growing the ring when it is still in use."""
        ring = self.ring
        ring[self.cur].end_offset = self.produced
        nxt = (self.cur + 1) % len(ring)
        grow_at, grow_count = 0, 0
        if not self._reusable(nxt):
            if len(ring) >= self.c_max:
                self.stats["blocked"] += 1
                return False
            count = min(self.c, self.c_max - len(ring))
            fresh = self._request_chunks(count, setup=False)
            nxt = self.cur + 1
            ring[nxt:nxt] = [ChunkRef(loc) for loc in fresh]
            grow_at, grow_count = nxt, len(fresh)
            self.stats["grows"] += 1
            log.debug("%r grew by %d", self, len(fresh))
        self._write_producer(self.cur, grow_at, grow_count, sealed=True)
        self.cur, self.pos, self.lap_start = nxt, 0, self.produced
        return True

    def _write_producer(self, index: int, grow_at: int, grow_count: int, *, sealed: bool) -> None:
        loc = self.ring[index].locator
        seg = self.process.segment(PRODUCER.size, wait=True)
        PRODUCER.pack_into(seg.view(), 0, self.lap_start, self.produced, grow_at, grow_count)
        self._write(seg, loc.sub(0, PRODUCER.size))
        if sealed:
            # Separate trailing write: once the seal is visible the fields above are too.
            word = self.process.segment(SEAL.size, wait=True)
            SEAL.pack_into(word.view(), 0, seal_word(self.lap_start))
            self._write(word, loc.sub(SEAL_AT, SEAL.size))

    def _write(self, local: RegisteredMemory, remote: RemoteMemoryLocator, sync=None) -> None:
        try:
            ticket = self.tx.write(local, remote, length=remote.length, sync=sync)
        except BaseException:
            self.process.free_segment(local)
            raise
        if not ticket.ok:
            self.process.free_segment(local)
            raise ChannelError(ticket.detail or f"{self!r}: write failed")

    def grow(self) -> bool:
        """Add `c` chunks after the current one. False at c_max."""
        if len(self.ring) >= self.c_max:
            return False
        self.ring[self.cur].end_offset = self.produced
        count = min(self.c, self.c_max - len(self.ring))
        fresh = self._request_chunks(count, setup=False)
        at = self.cur + 1
        self.ring[at:at] = [ChunkRef(loc) for loc in fresh]
        self._write_producer(self.cur, at, len(fresh), sealed=True)
        self.cur, self.pos, self.lap_start = at, 0, self.produced
        self.stats["grows"] += 1
        return True

    # --- Sending ---

    def _claim(self, size: int) -> Optional[RemoteMemoryLocator]:
        if size > self.capacity:
            raise SerializationError(f"record of {size} bytes exceeds the chunk capacity {self.capacity}")
        if self.pos + size > self.capacity and not self._advance():
            return None
        remote = self.ring[self.cur].locator.sub(CHUNK_HEADER + self.pos, size)
        self.pos += size
        self.produced += size
        return remote

    def _reserve(self, size: int) -> Optional[Reservation]:
        seg = self.process.segment(size)
        if seg is WOULD_BLOCK:
            self.stats["scratch_blocked"] += 1
            return None
        try:
            remote = self._claim(size)
        except BaseException:
            self.process.free_segment(seg)
            raise
        if remote is None:
            self.process.free_segment(seg)
            return None
        return Reservation(seg, remote, size)

    def try_reserve(self, size: int) -> Optional[Reservation]:
        """Space for one record in the stream, or None when the ring is full at c_max."""
        if self.closed:
            return None
        return self._reserve(size)

    def commit(self, res: Reservation, sync=None) -> None:
        self._write(res.local, res.remote, sync)
        self.stats["records"] += 1

    def send(self, data, sync=None) -> bool:
        """Send one already-serialized record."""
        res = self.try_reserve(len(data))
        if res is None:
            return False
        try:
            res.local.write(data)
        except BaseException:
            self.process.free_segment(res.local)
            raise
        self.commit(res, sync)
        return True

    def send_registered(self, mem: RegisteredMemory, size: int, sync=None) -> bool:
        """Write `size` bytes of serialized records straight from registered memory."""
        if self.closed:
            return False
        remote = self._claim(size)
        if remote is None:
            return False
        ticket = self.tx.write(mem, remote, length=size, sync=sync)
        if not ticket.ok:
            raise ChannelError(ticket.detail or f"{self!r}: write failed")
        self.stats["transfers"] += 1
        return True

    def flush(self) -> None:
        """Publish the advisory Producer offsets of the chunk being filled."""
        if self.pos:
            self._write_producer(self.cur, 0, 0, sealed=False)
            self.stats["flushes"] += 1

    def shutdown(self) -> None:
        if self.closed:
            return
        data = record(SysFn.SHUTDOWN)

        def sent() -> bool:
            res = self._reserve(len(data))
            if res is None:
                return False
            res.local.write(data)
            self._write(res.local, res.remote)
            return True

        if not spin_until(sent, self.ctx.settings.finalize_timeout, on_idle=self.ctx.progress):
            raise ChannelError(f"{self!r}: shutdown record could not be sent")
        self.closed = True
        log.debug("%r shut down", self)


class ReceiverChannel:
    """Receiving half: polls the chunk ring in stream order and runs ready records."""

    def __init__(self, ctx: "ThreadContext", grant: ChunkGrant):
        self.ctx = ctx
        self.sender = grant.sender
        self.ring = list(grant.chunks)
        sender, ack = read_sender_info(self.ring[0])
        if sender != grant.sender:
            raise ChannelError(f"first chunk names sender t{sender}, grant came from t{grant.sender}")
        self.ack = grant.ack or ack
        self.tx = ctx.process.transmitter_for(ctx.system.thread_ids[self.sender])
        self.cur = 0
        self.pos = 0
        self.consumed = 0
        self.lap_start = 0
        self.closed = False
        self.faulted = False
        self.stats: Counter = Counter()
        self._busy = False

    def __repr__(self) -> str:
        return f"ReceiverChannel({self.sender}->{self.ctx.tid.flat}, chunks={len(self.ring)}, consumed={self.consumed})"

    def ring_ids(self) -> list[tuple[int, int]]:
        return [(chunk.region.region_id, chunk.offset) for chunk in self.ring]

    def poll(self, budget: int = 64) -> int:
        if self._busy or self.closed or self.faulted:
            return 0
        self._busy = True
        n = 0
        try:
            while n < budget:
                chunk = self.ring[self.cur]
                at = chunk.offset + CHUNK_HEADER + self.pos
                try:
                    call = peek_record(chunk.region.buffer, at, chunk.offset + chunk.length)
                except SerializationError as e:
                    self.faulted = True
                    log.error("%r: channel fault: %s", self, e)
                    break
                if call is not None:
                    self.pos += call.total_length
                    self.consumed += call.total_length
                    if call.function_id == SysFn.SHUTDOWN:
                        self.closed = True
                        log.debug("%r closed by sender", self)
                        break
                    n += 1
                    self.ctx.run_call(self.sender, call.function_id, call.context, call.payload)
                    continue
                hint = self._sealed(chunk)
                if hint is None:
                    break
                self._finish(chunk, *hint)
        finally:
            self._busy = False
        self.stats["invoked"] += n
        return n

    def _sealed(self, chunk: RegisteredMemory) -> Optional[tuple[int, int]]:
        buf, base = chunk.region.buffer, chunk.offset
        if SEAL.unpack_from(buf, base + SEAL_AT)[0] != seal_word(self.lap_start):
            return None
        first, last, grow_at, grow_count = PRODUCER.unpack_from(buf, base)
        if first != self.lap_start or last != self.consumed:
            return None
        return grow_at, grow_count

    def _finish(self, chunk: RegisteredMemory, grow_at: int, grow_count: int) -> None:
        start = chunk.offset + CHUNK_HEADER
        chunk.region.buffer[start:start + self.pos] = bytes(self.pos)
        CONSUMER.pack_into(chunk.region.buffer, chunk.offset + CONSUMER_AT, self.consumed)
        self._push_consumed()
        if grow_count:
            grant = self.ctx.slot.incoming.take_grow(self.sender)
            if grant is None or len(grant.chunks) != grow_count:
                self.faulted = True
                raise ChannelError(f"{self!r}: sender grew by {grow_count} chunks but no matching grant arrived")
            if grow_at != self.cur + 1:
                log.warning("%r: grow hint %d does not follow chunk %d", self, grow_at, self.cur)
            self.ring[self.cur + 1:self.cur + 1] = grant.chunks
        self.cur = (self.cur + 1) % len(self.ring)
        self.pos = 0
        self.lap_start = self.consumed
        self.stats["chunks_done"] += 1

    def _push_consumed(self) -> None:
        seg = self.ctx.process.segment(ACK.size, wait=True)
        seg.write(ACK.pack(self.consumed))
        ticket = self.tx.write(seg, self.ack)
        if not ticket.ok:
            self.ctx.process.free_segment(seg)
            raise ChannelError(ticket.detail or f"{self!r}: pushing the consumed offset failed")
        self.stats["pushes"] += 1


class MessengerGlobal(RemoteCalls):
    """A thread's sending channels, created on the first call to each destination."""

    path = "write"

    def __init__(self, ctx: "ThreadContext"):
        super().__init__(ctx)
        self.channels: dict[int, SenderChannel] = {}

    def _check_owner(self) -> None:
        if self.ctx.settings.debug_ownership and threading.get_ident() not in self.ctx.owners:
            raise OwnershipError(f"{self.ctx.tid}: channels used from a thread that does not own them")

    def get(self, dest: Union[int, "ThreadId"]) -> SenderChannel:
        tid = self.ctx.system.resolve(dest)
        self._check_owner()
        channel = self.channels.get(tid.flat)
        if channel is None:
            channel = self.channels[tid.flat] = SenderChannel(self.ctx, tid)
        return channel

    setup = get

    def _submit(self, dest, function_id, context, payload, sync) -> bool:
        with self.ctx.channel_lock:
            channel = self.get(dest)
            res = channel.try_reserve(record_size(len(context), None if payload is None else len(payload)))
            if res is None:
                return False
            serialize_into(res.view, 0, function_id, context, payload)
            inflight = self.ctx.system.inflight
            inflight.fetch_add(1)
            try:
                channel.commit(res, sync)
            except BaseException:
                inflight.fetch_sub(1)
                raise
            return True

    def flush_all(self) -> None:
        for channel in list(self.channels.values()):
            channel.flush()

    def shutdown_all(self) -> int:
        for channel in list(self.channels.values()):
            channel.shutdown()
        return len(self.channels)
