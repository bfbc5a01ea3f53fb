# In fabricrpc/fabric/system.py

import logging
import random
import struct
import threading
import weakref
from collections import Counter, deque
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from contextlib import nullcontext
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Callable, Optional, Union

from ..config import Settings
from ..exceptions import (
    AccessFault,
    ChannelError,
    DrainTimeoutError,
    FabricError,
    SerializationError,
    SystemInitError,
)
from ..regmem import WOULD_BLOCK, CircularAllocator, LinearCircularAllocator, MachineArenas, RemoteMemoryLocator
from ..schemas import QueuePairConfig
from ..transmitter import TicketStatus, Transmitter, TransmitterSet
from ..utils import AtomicCounter, Backoff, MpscQueue, spin_until
from ..verbs import Cluster, LocalSlice, Opcode, SharedReceiveQueue, WorkRequest
from .calls import SYSTEM_HANDLERS, CallPolicy, LocalCalls, RemoteCalls, SendInvoker
from .chunks import (
    CHUNK_ALLOC_ARGS,
    REMOTE_ALLOC_ARGS,
    ChunkGrant,
    IncomingMemoryMap,
    write_sender_info,
)
from .registry import FunctionRegistry, Handler, Invocation, SysFn
from .serialization import ENVELOPE, SERVICE_DEST, peek_record, record_size, serialize_into
from .sync import Synchronizer

if TYPE_CHECKING:
    from ..aggregator import Aggregator
    from ..messenger import MessengerGlobal

log = logging.getLogger(__name__)

SERVICE_HDR = struct.Struct("<IIQ")  # origin process, origin thread (or SERVICE_DEST), request id
NOTIFY_ARGS = struct.Struct("<QII")  # sync id, ok, count
REPLY_OK = 0
REPLY_ERROR = 1

_tls = threading.local()


@dataclass(slots=True, frozen=True)
class ThreadId:
    machine: int
    process: int
    thread: int
    flat: int
    process_flat: int

    def __str__(self) -> str:
        return f"t{self.flat}[m{self.machine}.p{self.process}.t{self.thread}]"


@dataclass(slots=True)
class Delivery:
    src: int
    function_id: int
    context: bytes
    payload: Optional[bytes] = None
    buffer: Optional[bytes] = None


class ThreadSlot:
    """Per-thread state that exists before the thread attaches: its queue and incoming map."""

    def __init__(self, tid: ThreadId):
        self.tid = tid
        self.queue: MpscQueue[Delivery] = MpscQueue()
        self.incoming = IncomingMemoryMap()
        self.ctx: Optional["ThreadContext"] = None


#####################################################################
# System

class SystemContext:
    """Every simulated process of one run, wired all-to-all."""

    def __init__(self, settings: Settings, cluster: Optional[Cluster] = None):
        self.settings = settings
        self.cluster = cluster or Cluster.from_settings(settings)
        while len(self.cluster.machines) < settings.machines:
            self.cluster.add_machine()
        M, P, T = settings.machines, settings.processes_per_machine, settings.threads_per_process
        self.thread_ids = [ThreadId(m, p, t, (m * P + p) * T + t, m * P + p)
                           for m in range(M) for p in range(P) for t in range(T)]
        self.inflight = AtomicCounter()
        self.closed = False
        self.processes = [ProcessContext(self, m, p) for m in range(M) for p in range(P)]
        self._connect()
        for process in self.processes:
            process.start()
        log.info("system up: %dx%dx%d (%d threads, %s backend, %s delivery)",
                 M, P, T, self.n_threads, settings.backend, settings.delivery)

    def _connect(self) -> None:
        config = QueuePairConfig(u_max=self.settings.u_max)
        for i, a in enumerate(self.processes):
            for b in self.processes[i:]:
                qa, qb = self.cluster.connect(a.machine_id, b.machine_id, config,
                                              recv_cqs=(a.recv_cq, b.recv_cq), srqs=(a.srq, b.srq))
                a.attach(b.flat, qa)
                if b is not a:
                    b.attach(a.flat, qb)

    @property
    def n_threads(self) -> int:
        return len(self.thread_ids)

    def resolve(self, dest: Union[int, ThreadId]) -> ThreadId:
        if isinstance(dest, ThreadId):
            return dest
        if not 0 <= dest < len(self.thread_ids):
            raise FabricError(f"thread {dest} does not exist ({self.n_threads} threads)", code="unknown_thread")
        return self.thread_ids[dest]

    # --- Functions ---

    def register(self, function_id: int, fn: Handler, name: Optional[str] = None) -> None:
        """Register identically on every process."""
        for process in self.processes:
            process.registry.register(function_id, fn, name)

    def function(self, function_id: int, name: Optional[str] = None):
        def wrap(fn: Handler) -> Handler:
            self.register(function_id, fn, name)
            return fn
        return wrap

    def freeze(self) -> None:
        for process in self.processes:
            process.registry.freeze()

    # --- Running ---

    def init_thread(self, flat: int) -> "ThreadContext":
        tid = self.resolve(flat)
        return self.processes[tid.process_flat].init_thread(tid.thread)

    def contexts(self) -> list["ThreadContext"]:
        return [slot.ctx for p in self.processes for slot in p.slots if slot.ctx is not None]

    def quiescent(self) -> bool:
        return self.inflight.load() == 0

    def run_workers(self, body: Callable[["ThreadContext"], Any], *,
                    timeout: Optional[float] = None) -> list:
        """Run `body` on one OS thread per fabric thread, then keep every thread
        progressing until all bodies returned and nothing is in flight."""
        n = self.n_threads
        results: list = [None] * n
        errors: list[BaseException] = []
        finished = AtomicCounter()

        def quiet() -> bool:
            return finished.load() == n and self.inflight.load() == 0

        def worker(tid: ThreadId) -> None:
            ctx = None
            try:
                ctx = self.init_thread(tid.flat)
                results[tid.flat] = body(ctx)
            except BaseException as e:
                log.exception("%s: worker body failed", tid)
                errors.append(e)
            finally:
                finished.fetch_add(1)
                if ctx is not None:
                    if not spin_until(quiet, timeout, on_idle=lambda: ctx.progress() or ctx.flush_outgoing()):
                        errors.append(DrainTimeoutError(f"{tid}: system did not quiesce within {timeout}s"))
                    try:
                        ctx.finalize()
                    except FabricError as e:
                        errors.append(e)

        threads = [threading.Thread(target=worker, args=(tid,), name=f"worker-{tid.flat}", daemon=True)
                   for tid in self.thread_ids]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        return results

    def shutdown(self) -> None:
        if self.closed:
            return
        self.closed = True
        for ctx in self.contexts():
            ctx._stop_helpers()
        for process in self.processes:
            process.stop()
        self.cluster.close()
        current = getattr(_tls, "ctx", None)
        if current is not None and current.system is self:
            _tls.ctx = None
        log.info("system down")


#####################################################################
# Process

class ProcessContext:
    """
    One simulated process: its registry, zone arenas, receive buffers, a
    transmitter to every process (itself included), and the service thread.
    """

    def __init__(self, system: SystemContext, machine_id: int, process: int):
        s = system.settings
        self.system = system
        self.settings = s
        self.machine = system.cluster.machine(machine_id)
        self.machine_id = machine_id
        self.process = process
        self.flat = machine_id * s.processes_per_machine + process
        self.zone = process % self.machine.zones
        self.arenas = MachineArenas(self.machine, s.slab_size)
        self.registry = FunctionRegistry()
        self.srq = SharedReceiveQueue(machine_id)
        self.recv_cq = system.cluster.completion_queue(f"p{self.flat}.recv")
        self.transmitters = TransmitterSet()
        self._tx_by_process: dict[int, Transmitter] = {}
        first = self.flat * s.threads_per_process
        self.slots = [ThreadSlot(system.thread_ids[first + t]) for t in range(s.threads_per_process)]
        self.syncs: "weakref.WeakValueDictionary[int, Synchronizer]" = weakref.WeakValueDictionary()
        self._sync_ids = AtomicCounter(1)
        self._requests: dict[int, Future] = {}
        self._request_ids = AtomicCounter(1)
        self._local = threading.local()
        self._lock = threading.Lock()
        self._fetcher: Optional[ThreadPoolExecutor] = None
        self.stats: Counter = Counter()
        self._stats_lock = threading.Lock()
        self.recv_region = self.machine.register_memory(self.zone, s.recv_buffers * s.recv_buffer_size)
        for i in range(s.recv_buffers):
            self._post_recv(i)
        self._stop = threading.Event()
        self._service = threading.Thread(target=self._service_loop, name=f"service-p{self.flat}", daemon=True)
        self._service_handlers = {
            SysFn.CHUNK_ALLOC: self._serve_chunk_alloc,
            SysFn.REMOTE_ALLOC: self._serve_remote_alloc,
            SysFn.NOTIFY: self._serve_notify,
        }

    def __repr__(self) -> str:
        return f"ProcessContext(p{self.flat} m{self.machine_id}.{self.process} zone={self.zone})"

    def bump(self, key: str, n: int = 1) -> None:
        with self._stats_lock:
            self.stats[key] += n

    # --- Wiring ---

    def attach(self, peer: int, qp) -> None:
        tx = self.transmitters.add(Transmitter(qp))
        self._tx_by_process[peer] = tx

    def transmitter_to(self, process_flat: int) -> Transmitter:
        return self._tx_by_process[process_flat]

    def transmitter_for(self, tid: ThreadId) -> Transmitter:
        return self._tx_by_process[tid.process_flat]

    def start(self) -> None:
        self._service.start()

    def stop(self) -> None:
        self._stop.set()
        if self._service.is_alive():
            self._service.join(timeout=2.0)
        if self._fetcher is not None:
            self._fetcher.shutdown(wait=False)

    @property
    def fetcher(self) -> ThreadPoolExecutor:
        with self._lock:
            if self._fetcher is None:
                self._fetcher = ThreadPoolExecutor(max_workers=2, thread_name_prefix=f"fetch-p{self.flat}")
        return self._fetcher

    # --- Threads ---

    def init_thread(self, offset: int) -> "ThreadContext":
        if not 0 <= offset < len(self.slots):
            raise SystemInitError(f"thread offset {offset} outside 0..{len(self.slots) - 1} of p{self.flat}")
        current = getattr(_tls, "ctx", None)
        if current is not None and current.attached and not current.system.closed:
            raise SystemInitError(f"this OS thread already runs {current.tid}")
        slot = self.slots[offset]
        with self._lock:
            if slot.ctx is not None and slot.ctx.attached:
                raise SystemInitError(f"{slot.tid} is already initialized")
            self.system.freeze()
            if slot.ctx is None:
                slot.ctx = ThreadContext(self, slot)
            ctx = slot.ctx
            ctx._attach()
        _tls.ctx = ctx
        log.debug("%s attached", slot.tid)
        return ctx

    # --- Registered scratch memory ---

    def lin_allocator(self) -> LinearCircularAllocator:
        """The calling OS thread's packing allocator over its own circular ring."""
        lin = getattr(self._local, "lin", None)
        if lin is None:
            s = self.settings
            ring = CircularAllocator(self.arenas.arena(self.zone), s.unit_size, self.transmitters,
                                     initial=s.ring_initial, growth=s.ring_growth, max_units=s.ring_max,
                                     debug_ownership=s.debug_ownership)
            lin = self._local.lin = LinearCircularAllocator(ring)
        return lin

    def segment(self, length: int, *, wait: bool = False):
        """A scratch segment for one transmit; flushes to recycle when the ring is exhausted."""
        lin = self.lin_allocator()
        seg = lin.alloc(length)
        if seg is not WOULD_BLOCK:
            return seg
        self.transmitters.flush_all(self.settings.finalize_timeout)
        seg = lin.alloc(length)
        if seg is WOULD_BLOCK and wait:
            holder = []

            def got() -> bool:
                got_seg = lin.alloc(length)
                if got_seg is WOULD_BLOCK:
                    return False
                holder.append(got_seg)
                return True

            if not spin_until(got, self.settings.finalize_timeout, on_idle=self.transmitters.reap_all):
                raise DrainTimeoutError(f"p{self.flat}: no scratch memory recycled within the timeout")
            seg = holder[0]
        return seg

    def free_segment(self, seg) -> None:
        """Return a scratch segment this OS thread carved but will not transmit."""
        self.lin_allocator().free(seg)

    # --- Send-based path ---

    def send_message(self, dest_flat: int, src_flat: int, function_id: int, context: bytes,
                     payload: Optional[bytes] = None, *, sync=None, dest_process: Optional[int] = None) -> bool:
        """Serialize `envelope + record` into scratch memory and SEND it. False on back-pressure."""
        if dest_flat == SERVICE_DEST:
            peer = dest_process
        else:
            peer = self.system.thread_ids[dest_flat].process_flat
        size = ENVELOPE.size + record_size(len(context), None if payload is None else len(payload))
        if size > self.settings.recv_buffer_size:
            raise SerializationError(f"message of {size} bytes exceeds the {self.settings.recv_buffer_size}-byte "
                                     "receive buffers")
        seg = self.segment(size)
        if seg is WOULD_BLOCK:
            return False
        try:
            view = seg.view()
            ENVELOPE.pack_into(view, 0, dest_flat, src_flat)
            serialize_into(view, ENVELOPE.size, function_id, context, payload)
            tx = self.transmitter_to(peer)
        except BaseException:
            self.free_segment(seg)
            raise
        self.system.inflight.fetch_add(1)
        ticket = tx.send(seg, length=size, sync=sync)
        if ticket.ok:
            return True
        self.system.inflight.fetch_sub(1)
        self.free_segment(seg)
        if ticket.status == TicketStatus.BACKPRESSURE:
            self.bump("rnr")
            return False
        raise ChannelError(ticket.detail or f"send to p{peer} failed")

    def send_service(self, dest_process: int, function_id: int, args=b"", *, request_id: int = 0,
                     origin_thread: int = SERVICE_DEST) -> None:
        """A no-setup call handled by the destination's service thread. Retries until accepted."""
        context = SERVICE_HDR.pack(self.flat, origin_thread, request_id) + bytes(args)
        if not spin_until(lambda: self.send_message(SERVICE_DEST, origin_thread, function_id, context,
                                                    dest_process=dest_process),
                          self.settings.finalize_timeout, on_idle=self.transmitters.reap_all):
            raise DrainTimeoutError(f"p{self.flat}: service call to p{dest_process} not accepted")

    def request(self, dest_process: int, function_id: int, args=b"", *, origin_thread: int = SERVICE_DEST,
                timeout: Optional[float] = None) -> bytes:
        rid = self._request_ids.fetch_add(1)
        future: Future = Future()
        self._requests[rid] = future
        try:
            self.send_service(dest_process, function_id, args, request_id=rid, origin_thread=origin_thread)
            return future.result(timeout or self.settings.finalize_timeout)
        except FutureTimeout:
            raise DrainTimeoutError(f"p{self.flat}: no reply from p{dest_process} for {function_id:#x}") from None
        finally:
            self._requests.pop(rid, None)

    def send_notify(self, origin: int, sync_id: int, ok: bool, count: int = 1) -> None:
        self.send_service(origin, SysFn.NOTIFY, NOTIFY_ARGS.pack(sync_id, int(ok), count))

    def register_sync(self, sync: Synchronizer) -> int:
        if self.syncs.get(sync.sync_id) is not sync:
            sync.sync_id = self._sync_ids.fetch_add(1)
            self.syncs[sync.sync_id] = sync
        return sync.sync_id

    def deliver_local(self, thread: int, src: int, function_id: int, context: bytes,
                      payload: Optional[bytes] = None, buffer: Optional[bytes] = None) -> None:
        self.system.inflight.fetch_add(1)
        self.slots[thread].queue.push(Delivery(src, function_id, bytes(context), payload, buffer))

    def fetch(self, src: int, loc: RemoteMemoryLocator) -> bytes:
        """Read `loc` from the caller's machine into local memory and return the bytes."""
        if loc.length == 0:
            return b""
        tx = self.transmitter_for(self.system.thread_ids[src])
        buf = self.arenas.zone_alloc(self.zone, loc.length)
        try:
            ticket = tx.read(buf, loc)
            if not ticket.ok:
                raise AccessFault(ticket.detail or f"read of {loc} failed")
            if not tx.wait_epoch(ticket.epoch, self.settings.finalize_timeout):
                raise DrainTimeoutError(f"read of {loc} did not complete")
            return buf.read()
        finally:
            self.arenas.zone_free(buf)

    # --- Service thread ---

    def _post_recv(self, index: int) -> None:
        size = self.settings.recv_buffer_size
        self.srq.push(WorkRequest(Opcode.RECV, LocalSlice(self.recv_region.region_id, index * size, size),
                                  user_tag=index))

    def _service_loop(self) -> None:
        backoff = Backoff()
        deferred = self.settings.delivery == "deferred"
        while not self._stop.is_set():
            entries = self.recv_cq.poll(32)
            if not entries:
                if deferred:
                    self.machine.device.progress()
                backoff.wait()
                continue
            backoff.reset()
            for entry in entries:
                try:
                    self._handle_recv(entry.user_tag, entry.byte_len)
                except Exception:
                    log.exception("p%d: service thread failed on a received message", self.flat)
                finally:
                    self._post_recv(entry.user_tag)

    def _handle_recv(self, index: int, length: int) -> None:
        base = index * self.settings.recv_buffer_size
        view = memoryview(self.recv_region.buffer)[base:base + length]
        if length < ENVELOPE.size:
            log.warning("p%d: skipping a %d-byte message without envelope", self.flat, length)
            self.bump("malformed")
            return
        dest, src = ENVELOPE.unpack_from(view, 0)
        try:
            call = peek_record(view, ENVELOPE.size, length)
        except SerializationError as e:
            call = None
            log.warning("p%d: %s", self.flat, e)
        if call is None:
            log.warning("p%d: skipping malformed record from t%d", self.flat, src)
            self.bump("malformed")
            return
        if dest == SERVICE_DEST:
            try:
                self._serve(call.function_id, call.context)
            finally:
                self.system.inflight.fetch_sub(1)
            return
        offset = dest - self.slots[0].tid.flat
        if not 0 <= offset < len(self.slots):
            log.error("p%d: message for t%d routed to the wrong process", self.flat, dest)
            self.system.inflight.fetch_sub(1)
            return
        self.slots[offset].queue.push(Delivery(src, call.function_id, bytes(call.context),
                                               None if call.payload is None else bytes(call.payload)))
        self.bump("routed")

    def _serve(self, function_id: int, context: memoryview) -> None:
        origin, origin_thread, rid = SERVICE_HDR.unpack_from(context, 0)
        args = bytes(context[SERVICE_HDR.size:])
        if function_id == SysFn.REPLY:
            future = self._requests.get(rid)
            if future is None:
                log.warning("p%d: reply for unknown request %d", self.flat, rid)
            elif args[:1] == bytes([REPLY_OK]):
                future.set_result(args[1:])
            else:
                future.set_exception(FabricError(args[1:].decode(errors="replace"), code="remote"))
            return
        self.bump("service_calls")
        handler = self._service_handlers.get(function_id)
        try:
            if handler is None:
                raise FabricError(f"no service handler for {function_id:#x}", code="registry")
            reply, status = handler(args), REPLY_OK
        except FabricError as e:
            log.warning("p%d: service call from p%d failed: %s", self.flat, origin, e)
            reply, status = str(e).encode(), REPLY_ERROR
        if rid:
            self.send_service(origin, SysFn.REPLY, bytes([status]) + (reply or b""), request_id=rid)

    def _serve_chunk_alloc(self, args: bytes) -> bytes:
        thread, sender, count, chunk_size = CHUNK_ALLOC_ARGS.unpack_from(args, 0)
        ack = None
        if len(args) >= CHUNK_ALLOC_ARGS.size + RemoteMemoryLocator.SIZE:
            ack = RemoteMemoryLocator.unpack(args, CHUNK_ALLOC_ARGS.size)
        chunks = [self.arenas.zone_alloc(self.zone, chunk_size) for _ in range(count)]
        if ack is not None:
            write_sender_info(chunks[0], sender, ack)
        self.slots[thread].incoming.publish(ChunkGrant(sender, chunks, setup=ack is not None, ack=ack))
        self.bump("chunks_granted", count)
        log.debug("p%d: granted %d chunks to t%d for sender t%d", self.flat, count,
                  self.slots[thread].tid.flat, sender)
        return b"".join(chunk.locator().pack() for chunk in chunks)

    def _serve_remote_alloc(self, args: bytes) -> bytes:
        thread, length = REMOTE_ALLOC_ARGS.unpack_from(args, 0)
        if not 0 <= thread < len(self.slots):
            raise FabricError(f"thread offset {thread} outside p{self.flat}", code="unknown_thread")
        return self.arenas.zone_alloc(self.zone, length).locator().pack()

    def _serve_notify(self, args: bytes) -> None:
        sync_id, ok, count = NOTIFY_ARGS.unpack_from(args, 0)
        sync = self.syncs.get(sync_id)
        if sync is None:
            log.debug("p%d: notification for a released synchronizer %d", self.flat, sync_id)
            return None
        sync.notify(bool(ok), count)
        return None


#####################################################################
# Thread

class ThreadContext:
    """A worker thread's view of the fabric: its invokers, channels and progress loop."""

    def __init__(self, process: ProcessContext, slot: ThreadSlot):
        self.process = process
        self.system = process.system
        self.settings = process.settings
        self.slot = slot
        self.tid = slot.tid
        self.rng = random.Random((self.settings.seed << 16) ^ self.tid.flat)
        self.stats: Counter = Counter()
        self.sends = SendInvoker(self)
        self.local = LocalCalls(self)
        self.receivers: dict[int, Any] = {}
        self.helper_mode = self.settings.handling_mode == "helper"
        self.channel_lock = threading.RLock() if self.helper_mode or self.settings.agg_helper else nullcontext()
        self.owners: set[int] = set()
        self.attached = False
        self._messenger: Optional["MessengerGlobal"] = None
        self._aggregators: dict[str, "Aggregator"] = {}
        self._async: deque = deque()
        self._in_progress = False
        self._helper: Optional[threading.Thread] = None
        self._helper_stop = threading.Event()

    def __repr__(self) -> str:
        return f"ThreadContext({self.tid})"

    def _attach(self) -> None:
        self.owners = {threading.get_ident()}
        self.attached = True
        if self.helper_mode:
            self._helper_stop.clear()
            self._helper = threading.Thread(target=self._helper_loop, name=f"helper-{self.tid.flat}", daemon=True)
            self._helper.start()
            self.owners.add(self._helper.ident)
        for agg in self._aggregators.values():
            agg.start()

    # --- Invokers ---

    @property
    def messenger(self) -> "MessengerGlobal":
        if self._messenger is None:
            from ..messenger import MessengerGlobal

            self._messenger = MessengerGlobal(self)
        return self._messenger

    def aggregator(self, mode: Optional[str] = None) -> "Aggregator":
        mode = mode or self.settings.agg_mode
        agg = self._aggregators.get(mode)
        if agg is None:
            from ..aggregator import Aggregator

            agg = self._aggregators[mode] = Aggregator(self, mode)
        return agg

    def calls(self, path: str) -> RemoteCalls:
        if path == "send":
            return self.sends
        if path == "write":
            return self.messenger
        if path in ("trad", "ovfl"):
            return self.aggregator(path)
        if path == "local":
            return self.local
        raise FabricError(f"unknown invocation path '{path}'", code="unknown_path")

    def remote_alloc(self, dest: Union[int, ThreadId], length: int) -> RemoteMemoryLocator:
        """Registered memory in `dest`'s zone, usable as a call_buffer_write destination."""
        tid = self.system.resolve(dest)
        reply = self.process.request(tid.process_flat, SysFn.REMOTE_ALLOC,
                                     REMOTE_ALLOC_ARGS.pack(tid.thread, length), origin_thread=self.tid.flat)
        return RemoteMemoryLocator.unpack(reply)

    # --- Execution ---

    def dispatch(self, src: int, function_id: int, context, payload=None, buffer=None):
        handler = SYSTEM_HANDLERS.get(function_id)
        if handler is not None:
            return handler(self, src, context, payload, buffer)
        entry = self.process.registry.lookup(function_id)
        self.stats["invoked"] += 1
        return entry.fn(Invocation(self, self.system.thread_ids[src], function_id, bytes(context),
                                   buffer if buffer is not None else payload))

    def run_call(self, src: int, function_id: int, context, payload=None, buffer=None) -> None:
        """Top-level invocation of one delivered call; it leaves the in-flight count either way."""
        try:
            self.dispatch(src, function_id, context, payload, buffer)
        except Exception:
            self.stats["handler_errors"] += 1
            log.exception("%s: call %#x from t%d failed", self.tid, function_id, src)
        finally:
            self.system.inflight.fetch_sub(1)

    def fetch_async(self, src: int, loc: RemoteMemoryLocator, function_id: int, context: bytes,
                    payload: Optional[bytes]) -> None:
        self.system.inflight.fetch_add(1)

        def job() -> None:
            try:
                data = self.process.fetch(src, loc)
            except Exception:
                log.exception("%s: asynchronous fetch of %s failed", self.tid, loc)
                self.system.inflight.fetch_sub(1)
                return
            self.slot.queue.push(Delivery(src, function_id, context, payload, data))

        self.process.fetcher.submit(job)

    # --- Progress ---

    def poll_incoming(self, budget: int = 64) -> int:
        n = 0
        with self.channel_lock:
            for d in self.slot.queue.drain(budget):
                self.run_call(d.src, d.function_id, d.context, d.payload, d.buffer)
                n += 1
            grants = self.slot.incoming.new_channels()
            if grants:
                from ..messenger import ReceiverChannel

                for grant in grants:
                    self.receivers[grant.sender] = ReceiverChannel(self, grant)
            for receiver in list(self.receivers.values()):
                n += receiver.poll(budget)
        return n

    def progress_outgoing(self) -> int:
        n = self._drain_async()
        for agg in list(self._aggregators.values()):
            n += agg.progress()
        self.process.transmitters.reap_all()
        return n

    def progress(self, budget: int = 64) -> int:
        """One round of outgoing work, then incoming work unless this is a nested call."""
        n = self.progress_outgoing()
        if not self.helper_mode and not self._in_progress:
            self._in_progress = True
            try:
                n += self.poll_incoming(budget)
            finally:
                self._in_progress = False
        return n

    def flush_outgoing(self) -> int:
        n = 0
        for agg in list(self._aggregators.values()):
            n += agg.push()
        self.process.transmitters.flush_all(self.settings.finalize_timeout)
        return n

    def _helper_loop(self) -> None:
        backoff = Backoff()
        while not self._helper_stop.is_set():
            if self.poll_incoming():
                backoff.reset()
            else:
                backoff.wait()

    def _stop_helpers(self) -> None:
        for agg in list(self._aggregators.values()):
            agg.stop()
        self._helper_stop.set()
        if self._helper is not None and self._helper is not threading.current_thread():
            self._helper.join(timeout=2.0)
        self._helper = None

    # --- Policies ---

    def apply_policy(self, attempt: Callable[[], bool], policy: CallPolicy) -> bool:
        if policy is CallPolicy.FAIL:
            return attempt()
        if policy is CallPolicy.RETRY_ASYNC:
            if not self._async and attempt():
                return True
            self.system.inflight.fetch_add(1)
            self._async.append(attempt)
            return True

        def step() -> int:
            n = self.progress()
            return n or self.flush_outgoing()

        if not spin_until(attempt, self.settings.finalize_timeout, on_idle=step):
            raise DrainTimeoutError(f"{self.tid}: call not accepted within {self.settings.finalize_timeout}s")
        return True

    def _drain_async(self) -> int:
        n = 0
        while self._async:
            if not self._async[0]():
                break
            self._async.popleft()
            self.system.inflight.fetch_sub(1)
            n += 1
        return n

    # --- Waiting and teardown ---

    def wait(self, sync: Synchronizer, timeout: Optional[float] = None) -> bool:
        def step() -> int:
            n = self.progress()
            return n or self.flush_outgoing()

        return sync.wait(self.settings.finalize_timeout if timeout is None else timeout, progress=step)

    def _drained(self) -> bool:
        return not self._async and all(agg.empty for agg in self._aggregators.values())

    def finalize(self, timeout: Optional[float] = None) -> None:
        """Block until this thread's outgoing calls are handed to the transport and flushed."""
        if not self.attached:
            return
        timeout = self.settings.finalize_timeout if timeout is None else timeout
        drained = spin_until(self._drained, timeout, on_idle=lambda: self.progress() or self.flush_outgoing())
        if self._messenger is not None:
            self._messenger.flush_all()
        self.process.transmitters.flush_all(timeout)
        self._stop_helpers()
        self.attached = False
        if getattr(_tls, "ctx", None) is self:
            _tls.ctx = None
        log.debug("%s finalized", self.tid)
        if not drained:
            raise DrainTimeoutError(f"{self.tid}: outgoing calls did not drain within {timeout}s")


#####################################################################
# Module-level entry points

_system: Optional[SystemContext] = None
_system_lock = threading.Lock()


def init_system(settings: Optional[Settings] = None, cluster: Optional[Cluster] = None) -> SystemContext:
    global _system
    with _system_lock:
        if _system is not None and not _system.closed:
            raise SystemInitError("the fabric is already initialized")
        if settings is None:
            from ..config import settings as default_settings

            settings = default_settings
        _system = SystemContext(settings, cluster)
        return _system


def current_system() -> SystemContext:
    if _system is None or _system.closed:
        raise SystemInitError("the fabric is not initialized")
    return _system


def init_thread(offset: int, *, process: int = 0) -> ThreadContext:
    system = current_system()
    if not 0 <= process < len(system.processes):
        raise SystemInitError(f"process {process} does not exist")
    return system.processes[process].init_thread(offset)


def current_thread() -> ThreadContext:
    ctx = getattr(_tls, "ctx", None)
    if ctx is None or not ctx.attached:
        raise SystemInitError("this OS thread has no fabric thread")
    return ctx


def finalize_thread(timeout: Optional[float] = None) -> None:
    current_thread().finalize(timeout)


def shutdown_system() -> None:
    global _system
    with _system_lock:
        if _system is not None:
            _system.shutdown()
        _system = None
