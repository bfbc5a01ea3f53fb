# In fabricrpc/fabric/calls.py

import logging
import struct
from enum import Enum
from typing import TYPE_CHECKING, Callable, Optional, Union

from ..exceptions import AccessFault, ChannelError, FabricError
from ..regmem import WOULD_BLOCK, RegisteredMemory, RemoteMemoryLocator
from .registry import SysFn
from .serialization import finalize, parse_record, serialize_call
from .sync import SLOT, SLOT_FAILED, SLOT_OK, Synchronizer, SyncMode

if TYPE_CHECKING:
    from .system import ThreadContext, ThreadId

log = logging.getLogger(__name__)

NOTIFY_CTX = struct.Struct("<IIQ")  # origin process, flags, sync id
NOTIFY_HAS_SLOT = 1
FETCH_FLAGS = struct.Struct("<I")
FETCH_ASYNC = 1
BCAST_CTX = struct.Struct("<III")  # root flat id, arity, path code

PATHS = ("send", "write", "trad", "ovfl", "local")

Dest = Union[int, "ThreadId"]
Wrap = Callable[[int, bytes, Optional[bytes]], tuple]


class CallPolicy(str, Enum):
    FAIL = "fail"
    RETRY = "retry"
    RETRY_ASYNC = "retry_async"


def record(function_id: int, context=b"", payload=None) -> bytes:
    buf = serialize_call(function_id, context, payload)
    finalize(buf)
    return bytes(buf)


def tree_children(node: int, root: int, n: int, arity: int) -> list[int]:
    """Children of `node` in an `arity`-ary tree over flat ids rotated to start at `root`."""
    rel = (node - root) % n
    first = rel * arity + 1
    return [(root + c) % n for c in range(first, first + arity) if c < n]


def subtree_size(node: int, root: int, n: int, arity: int) -> int:
    """Threads reached through `node`, itself included."""
    size, todo = 0, [node]
    while todo:
        size += 1
        todo.extend(tree_children(todo.pop(), root, n, arity))
    return size


class RemoteCalls:
    """
    The invocation primitives over one transport path.

    Subclasses provide `_submit`, which hands one serialized call to the path
    and returns False on back-pressure. Everything else (synchronizer
    wrapping, policies, buffer variants, broadcast) is shared.
    """

    path = ""
    ordered_with_transport = True

    def __init__(self, ctx: "ThreadContext"):
        self.ctx = ctx

    def _submit(self, dest: "ThreadId", function_id: int, context: bytes,
                payload: Optional[bytes], sync) -> bool:
        raise NotImplementedError

    # --- Plumbing ---

    def _notifying(self, function_id, context, payload, sync: Synchronizer):
        process = self.ctx.process
        sid = process.register_sync(sync)
        flags, tail, slot = 0, b"", None
        if sync.slots is not None:
            slot = sync.reserve_slot()
            flags |= NOTIFY_HAS_SLOT
            tail = sync.slot_locator(slot).pack()
        ctx = NOTIFY_CTX.pack(process.flat, flags, sid) + tail
        return SysFn.NOTIFYING, ctx, record(function_id, context, payload), slot

    def _issue(self, dest: Dest, function_id: int, context, payload, sync: Optional[Synchronizer],
               policy: CallPolicy, *, remote: bool = False, outer: Optional[Wrap] = None) -> bool:
        dest = self.ctx.system.resolve(dest)
        context = bytes(context)
        payload = None if payload is None else bytes(payload)
        tx_sync, slot = None, None
        if sync is not None:
            if remote or sync.mode is SyncMode.ON_REMOTE_CONSUME:
                function_id, context, payload, slot = self._notifying(function_id, context, payload, sync)
            else:
                tx_sync = sync
            sync.add()
        if outer is not None:
            function_id, context, payload = outer(function_id, context, payload)
        try:
            ok = self.ctx.apply_policy(
                lambda: self._submit(dest, function_id, context, payload, tx_sync), CallPolicy(policy))
        except BaseException:
            self._withdraw(sync, slot)
            raise
        if not ok:
            self._withdraw(sync, slot)
        return ok

    @staticmethod
    def _withdraw(sync: Optional[Synchronizer], slot: Optional[int]) -> None:
        if sync is None:
            return
        sync.cancel()
        if slot is not None:
            sync.release_slot(slot)

    # --- Primitives ---

    def call(self, dest: Dest, function_id: int, context=b"", sync: Optional[Synchronizer] = None,
             policy: CallPolicy = CallPolicy.FAIL) -> bool:
        return self._issue(dest, function_id, context, None, sync, policy)

    def call_buffer(self, dest: Dest, function_id: int, context, buffer,
                    sync: Optional[Synchronizer] = None, policy: CallPolicy = CallPolicy.FAIL) -> bool:
        """The buffer travels inside the serialized call."""
        return self._issue(dest, function_id, context, buffer, sync, policy)

    def call_buffer_write(self, dest: Dest, function_id: int, context, orig: RegisteredMemory,
                          dest_buffer: RemoteMemoryLocator, sync: Optional[Synchronizer] = None,
                          policy: CallPolicy = CallPolicy.FAIL) -> bool:
        """Copy `orig` into `dest_buffer` by one-sided write, then invoke with the written buffer."""
        dest = self.ctx.system.resolve(dest)
        if dest_buffer.machine != dest.machine:
            raise AccessFault(f"destination buffer on m{dest_buffer.machine} but callee is on m{dest.machine}")
        n = min(orig.length, dest_buffer.length)
        tx = self.ctx.process.transmitter_for(dest)
        ticket = tx.write(orig, dest_buffer, length=n)
        if not ticket.ok:
            raise AccessFault(ticket.detail or "write of the call buffer failed")
        if not self.ordered_with_transport:
            tx.wait_epoch(ticket.epoch, self.ctx.settings.finalize_timeout)
        loc = dest_buffer.sub(0, n).pack()
        return self._issue(dest, function_id, context, None, sync, policy,
                           outer=lambda f, c, p: (SysFn.WRITTEN, loc, record(f, c, p)))

    def call_buffer_read(self, dest: Dest, function_id: int, context, orig: RegisteredMemory,
                         sync: Optional[Synchronizer] = None, policy: CallPolicy = CallPolicy.FAIL,
                         *, async_fetch: bool = False) -> bool:
        """The callee reads `orig` by one-sided read before invoking. `orig` must stay intact until then."""
        fetch = orig.locator().pack() + FETCH_FLAGS.pack(FETCH_ASYNC if async_fetch else 0)
        return self._issue(dest, function_id, context, None, sync, policy,
                           outer=lambda f, c, p: (SysFn.FETCH, fetch, record(f, c, p)))

    def call_return(self, dest: Dest, function_id: int, context,
                    origin: Union[RegisteredMemory, RemoteMemoryLocator],
                    sync: Optional[Synchronizer] = None, policy: CallPolicy = CallPolicy.FAIL) -> bool:
        """The callee's return bytes are written back into `origin`; `sync` fires after the write-back."""
        loc = origin.locator() if isinstance(origin, RegisteredMemory) else origin
        return self._issue(dest, SysFn.RETURN, loc.pack(), record(function_id, context), sync, policy,
                           remote=True)

    def broadcast(self, function_id: int, context=b"", sync: Optional[Synchronizer] = None,
                  policy: CallPolicy = CallPolicy.FAIL) -> bool:
        return self._broadcast(function_id, context, None, sync, policy)

    def broadcast_buffer(self, function_id: int, context, buffer, sync: Optional[Synchronizer] = None,
                         policy: CallPolicy = CallPolicy.FAIL) -> bool:
        return self._broadcast(function_id, context, bytes(buffer), sync, policy)

    def _broadcast(self, function_id, context, payload, sync, policy) -> bool:
        """Returns whether the root accepted the call. Subtrees an inner node could not
        reach come back on `sync` as failed notifications, one per missed thread."""
        ctx = self.ctx
        n = ctx.system.n_threads
        context = bytes(context)
        if sync is not None:
            if sync.slots is not None:
                raise FabricError("broadcast notifications are send-based; use a synchronizer without slots")
            function_id, context, payload, _ = self._notifying(function_id, context, payload, sync)
            sync.add(n)
        inner = record(function_id, context, payload)
        bctx = BCAST_CTX.pack(ctx.tid.flat, ctx.settings.broadcast_arity, PATHS.index(self.path))
        me = ctx.tid
        try:
            ok = ctx.apply_policy(lambda: self._submit(me, SysFn.BCAST, bctx, inner, None), CallPolicy(policy))
        except BaseException:
            if sync is not None:
                sync.cancel(n)
            raise
        if not ok and sync is not None:
            sync.cancel(n)
        return ok


#####################################################################
# System handlers, run on the callee thread

def on_notifying(ctx: "ThreadContext", src: int, context, payload, buffer=None):
    origin, flags, sid = NOTIFY_CTX.unpack_from(context, 0)
    slot = RemoteMemoryLocator.unpack(context, NOTIFY_CTX.size) if flags & NOTIFY_HAS_SLOT else None
    inner = parse_record(payload)
    ok = True
    result = None
    try:
        result = ctx.dispatch(src, inner.function_id, inner.context, inner.payload, buffer)
    except Exception:
        ok = False
        log.exception("t%d: notifying call %#x failed", ctx.tid.flat, inner.function_id)
    notify_origin(ctx, origin, sid, slot, ok)
    return result


def notify_origin(ctx: "ThreadContext", origin: int, sid: int,
                  slot: Optional[RemoteMemoryLocator], ok: bool) -> None:
    process = ctx.process
    if slot is None:
        process.send_notify(origin, sid, ok)
        return
    seg = process.segment(SLOT.size)
    if seg is WOULD_BLOCK:
        process.send_notify(origin, sid, ok)
        return
    seg.write(SLOT.pack(SLOT_OK if ok else SLOT_FAILED))
    try:
        ticket = process.transmitter_to(origin).write(seg, slot)
    except BaseException:
        process.free_segment(seg)
        raise
    if not ticket.ok:
        process.free_segment(seg)
        raise AccessFault(ticket.detail or "notification write-back failed")


def on_written(ctx: "ThreadContext", src: int, context, payload, buffer=None):
    loc = RemoteMemoryLocator.unpack(context)
    region = ctx.process.machine.region(loc.region_id)
    if not region.contains(loc.offset, loc.length):
        raise AccessFault(f"written buffer {loc} outside region {loc.region_id}")
    view = memoryview(region.buffer)[loc.offset:loc.offset + loc.length]
    inner = parse_record(payload)
    return ctx.dispatch(src, inner.function_id, inner.context, inner.payload, view)


def on_fetch(ctx: "ThreadContext", src: int, context, payload, buffer=None):
    loc = RemoteMemoryLocator.unpack(context)
    (flags,) = FETCH_FLAGS.unpack_from(context, RemoteMemoryLocator.SIZE)
    inner = parse_record(payload)
    if flags & FETCH_ASYNC:
        ctx.fetch_async(src, loc, inner.function_id, bytes(inner.context),
                        None if inner.payload is None else bytes(inner.payload))
        return None
    data = ctx.process.fetch(src, loc)
    return ctx.dispatch(src, inner.function_id, inner.context, inner.payload, memoryview(data))


def on_return(ctx: "ThreadContext", src: int, context, payload, buffer=None):
    loc = RemoteMemoryLocator.unpack(context)
    src_tid = ctx.system.thread_ids[src]
    if loc.machine != src_tid.machine:
        raise AccessFault(f"return locator on m{loc.machine} does not belong to caller on m{src_tid.machine}")
    inner = parse_record(payload)
    result = ctx.dispatch(src, inner.function_id, inner.context, inner.payload, buffer)
    if not result:
        return None
    result = bytes(result)
    if len(result) > loc.length:
        raise AccessFault(f"return value of {len(result)} bytes exceeds the {loc.length}-byte origin")
    seg = ctx.process.segment(len(result), wait=True)
    seg.write(result)
    try:
        ticket = ctx.process.transmitter_for(src_tid).write(seg, loc.sub(0, len(result)))
    except BaseException:
        ctx.process.free_segment(seg)
        raise
    if not ticket.ok:
        ctx.process.free_segment(seg)
        raise AccessFault(ticket.detail or "write-back of the return value failed")
    return None


def on_broadcast(ctx: "ThreadContext", src: int, context, payload, buffer=None):
    root, arity, path = BCAST_CTX.unpack_from(context, 0)
    children = tree_children(ctx.tid.flat, root, ctx.system.n_threads, arity)
    inner = parse_record(payload)
    if children:
        calls = ctx.calls(PATHS[path])
        data = bytes(payload)
        ctx_bytes = bytes(context)
        origin = None
        if inner.function_id == SysFn.NOTIFYING:
            origin_process, _, sid = NOTIFY_CTX.unpack_from(inner.context, 0)
            origin = (origin_process, sid)
        for child in children:
            tid = ctx.system.thread_ids[child]
            ctx.apply_policy(lambda tid=tid: _forward(ctx, calls, tid, ctx_bytes, data, root, arity, origin),
                             CallPolicy.RETRY_ASYNC)
        ctx.stats["bcast_forwards"] += len(children)
    return ctx.dispatch(src, inner.function_id, inner.context, inner.payload, buffer)


def _forward(ctx: "ThreadContext", calls: RemoteCalls, child: "ThreadId", context: bytes, data: bytes,
             root: int, arity: int, origin: Optional[tuple[int, int]]) -> bool:
    """Hand the broadcast to one child; a child that cannot be reached is reported as a lost subtree."""
    try:
        return calls._submit(child, SysFn.BCAST, context, data, None)
    except FabricError as e:
        lost = subtree_size(child.flat, root, ctx.system.n_threads, arity)
        ctx.stats["bcast_lost"] += lost
        log.warning("t%d: broadcast forward to t%d failed, %d threads not reached: %s",
                    ctx.tid.flat, child.flat, lost, e)
        if origin is not None:
            ctx.process.send_notify(origin[0], origin[1], False, lost)
        return True


SYSTEM_HANDLERS = {
    SysFn.NOTIFYING: on_notifying,
    SysFn.WRITTEN: on_written,
    SysFn.FETCH: on_fetch,
    SysFn.RETURN: on_return,
    SysFn.BCAST: on_broadcast,
}


#####################################################################
# Send-based and process-local paths

class SendInvoker(RemoteCalls):
    """Calls carried by two-sided sends into the destination's receive buffers."""

    path = "send"

    def _submit(self, dest, function_id, context, payload, sync) -> bool:
        return self.ctx.process.send_message(dest.flat, self.ctx.tid.flat, function_id, context, payload,
                                             sync=sync)


class LocalCalls(RemoteCalls):
    """Calls pushed straight onto a same-process thread's queue."""

    path = "local"
    ordered_with_transport = False

    def _submit(self, dest, function_id, context, payload, sync) -> bool:
        process = self.ctx.process
        if dest.process_flat != process.flat:
            raise ChannelError(f"t{dest.flat} is not in process {process.flat}; the local path cannot reach it")
        process.deliver_local(dest.thread, self.ctx.tid.flat, function_id, context, payload)
        if sync is not None:
            sync.notify()
        return True


__all__ = [
    "CallPolicy", "RemoteCalls", "SendInvoker", "LocalCalls", "SYSTEM_HANDLERS",
    "record", "tree_children", "subtree_size", "PATHS",
]
