# In fabricrpc/verbs/device.py

import logging
import random
import threading
import time
from collections import Counter, deque
from typing import Callable, Optional

from ..exceptions import (
    AccessFault,
    CompletionQueueOverflow,
    DuplicateConnectionError,
    OverflowFault,
    ReceiverNotReadyError,
    RegistrationCapError,
    UnknownMachineError,
    UnknownZoneError,
    VerbsError,
)
from ..schemas import QueuePairConfig
from .types import (
    CompletionEntry,
    MemoryRegion,
    Opcode,
    PostReceipt,
    Status,
    WorkRequest,
)

log = logging.getLogger(__name__)

PAGE = 4096


def apply_write(region: MemoryRegion, offset: int, data: bytes,
                split: bool = False, rng: Optional[random.Random] = None) -> None:
    """Land `data` in `region`. With `split`, the bytes become visible in two
    8-aligned halves applied in random order, with a scheduler yield between."""
    n = len(data)
    if not split or n <= 8:
        region.buffer[offset:offset + n] = data
        return
    rng = rng or random
    cut = rng.randrange(8, n, 8)
    halves = [(0, cut), (cut, n)]
    if rng.random() < 0.5:
        halves.reverse()
    first, second = halves
    region.buffer[offset + first[0]:offset + first[1]] = data[first[0]:first[1]]
    time.sleep(0)
    region.buffer[offset + second[0]:offset + second[1]] = data[second[0]:second[1]]


class CompletionQueue:
    def __init__(self, depth: int = 4096, name: str = ""):
        self.depth = depth
        self.name = name
        self._entries: deque = deque()
        self.overruns = 0

    def push(self, entry: CompletionEntry) -> None:
        if len(self._entries) >= self.depth:
            self.overruns += 1
            raise CompletionQueueOverflow(f"completion queue '{self.name}' overran depth {self.depth}")
        self._entries.append(entry)

    def poll(self, max_entries: int = 16) -> list[CompletionEntry]:
        out = []
        while len(out) < max_entries:
            try:
                out.append(self._entries.popleft())
            except IndexError:
                break
        return out

    def __len__(self) -> int:
        return len(self._entries)


class SharedReceiveQueue:
    """Posted RECV requests, consumed in FIFO order by any attached queue pair."""

    def __init__(self, machine: int):
        self.machine = machine
        self._wrs: deque = deque()

    def push(self, wr: WorkRequest) -> None:
        self._wrs.append(wr)

    def take(self) -> Optional[WorkRequest]:
        try:
            return self._wrs.popleft()
        except IndexError:
            return None

    def __len__(self) -> int:
        return len(self._wrs)


class QueuePair:
    def __init__(self, device: "Device", qp_id: int, peer: int, u_max: int,
                 send_cq: CompletionQueue, recv_cq: CompletionQueue,
                 srq: Optional[SharedReceiveQueue] = None):
        self.device = device
        self.qp_id = qp_id
        self.peer = peer
        self.u_max = u_max
        self.send_cq = send_cq
        self.recv_cq = recv_cq
        self.recv_queue = srq if srq is not None else SharedReceiveQueue(device.machine.machine_id)
        self.pending_unsignaled = 0
        self.next_seq = 0
        self.signaled_posted = 0
        self.remote: Optional["QueuePair"] = None
        self.link = None
        self._deferred: deque = deque()

    @property
    def machine_id(self) -> int:
        return self.device.machine.machine_id

    def post(self, wr: WorkRequest) -> PostReceipt:
        return self.device.post(self, wr)

    def __repr__(self) -> str:
        return f"QueuePair(id={self.qp_id}, m{self.machine_id}->m{self.peer}, u_max={self.u_max})"


class Device:
    """The simulated adapter of one machine. Posts are serialized by `lock`."""

    def __init__(self, machine: "Machine"):
        self.machine = machine
        self.cluster = machine.cluster
        self.lock = threading.RLock()
        self.qps: dict[int, QueuePair] = {}
        self.stats: Counter = Counter()
        self._stats_lock = threading.Lock()
        self.on_execute: Optional[Callable[[QueuePair, WorkRequest, int], None]] = None

    def bump(self, key: str, n: int = 1) -> None:
        with self._stats_lock:
            self.stats[key] += n

    # --- Posting ---

    def post(self, qp: QueuePair, wr: WorkRequest) -> PostReceipt:
        with self.lock:
            self._validate(qp, wr)
            if wr.op == Opcode.RECV:
                qp.recv_queue.push(wr)
                self.bump("posts_RECV")
                return PostReceipt(-1, qp.signaled_posted, False)

            if not wr.signaled and qp.pending_unsignaled + 1 > qp.u_max:
                self.bump("overflow_faults")
                raise OverflowFault(
                    f"qp {qp.qp_id}: more than {qp.u_max} unsignaled requests outstanding")

            eager = self.cluster.delivery == "eager" or qp.link is not None
            recv = None
            if wr.op == Opcode.SEND and eager and qp.link is None:
                recv = qp.remote.recv_queue.take()
                if recv is None:
                    self.bump("rnr")
                    raise ReceiverNotReadyError(f"no receive posted at m{qp.peer} for qp {qp.remote.qp_id}")

            epoch = qp.signaled_posted
            if wr.signaled:
                qp.signaled_posted += 1
                qp.pending_unsignaled = 0
                self.bump("signaled")
            else:
                qp.pending_unsignaled += 1
            seq = qp.next_seq
            qp.next_seq += 1
            self.bump(f"posts_{wr.op.name}")

            if eager:
                self._execute(qp, wr, seq, epoch, recv)
            else:
                qp._deferred.append((wr, seq, epoch))
                if wr.signaled:
                    self._drain(qp)
            return PostReceipt(seq, epoch, wr.signaled)

    def progress(self) -> int:
        """Execute every deferred request on every queue pair of this device."""
        done = 0
        with self.lock:
            for qp in list(self.qps.values()):
                done += self._drain(qp)
        return done

    def _drain(self, qp: QueuePair) -> int:
        done = 0
        while qp._deferred:
            wr, seq, epoch = qp._deferred.popleft()
            self._execute(qp, wr, seq, epoch)
            done += 1
        return done

    # --- Validation ---

    def _validate(self, qp: QueuePair, wr: WorkRequest) -> None:
        if qp.remote is None:
            raise VerbsError(f"qp {qp.qp_id} is not connected")
        if wr.op in (Opcode.SEND, Opcode.RECV) and wr.remote is not None:
            raise VerbsError(f"{wr.op.name} does not take a remote target")
        if wr.op in (Opcode.WRITE, Opcode.READ) and wr.remote is None and not wr.is_noop:
            raise VerbsError(f"{wr.op.name} requires a remote target")
        if wr.local is not None:
            region = self.machine.regions.get(wr.local.region_id)
            if region is None or not region.contains(wr.local.offset, wr.local.length):
                raise AccessFault(f"local slice {wr.local} outside registered memory on m{self.machine.machine_id}")
        if wr.remote is not None:
            peer = self.cluster.machine(qp.peer)
            region = peer.regions.get(wr.remote.region_id)
            if region is None or not region.contains(wr.remote.offset, wr.length):
                raise AccessFault(
                    f"remote target {wr.remote} (+{wr.length}) outside registered memory on m{qp.peer}")

    # --- Execution ---

    def _local_view(self, wr: WorkRequest) -> memoryview:
        region = self.machine.regions[wr.local.region_id]
        return memoryview(region.buffer)[wr.local.offset:wr.local.offset + wr.local.length]

    def _execute(self, qp: QueuePair, wr: WorkRequest, seq: int, epoch: int,
                 recv: Optional[WorkRequest] = None) -> None:
        if qp.link is not None:
            qp.link.transmit(qp, wr, seq, epoch)
        else:
            if not wr.is_noop:
                self._execute_local(qp, wr, recv)
            if wr.signaled:
                qp.send_cq.push(CompletionEntry(
                    qp.qp_id, wr.user_tag, Status.OK, wr.op, wr.length, seq, epoch))
        if self.on_execute is not None:
            self.on_execute(qp, wr, seq)

    def _execute_local(self, qp: QueuePair, wr: WorkRequest, recv: Optional[WorkRequest]) -> None:
        peer = self.cluster.machine(qp.peer)
        if wr.op == Opcode.WRITE:
            data = bytes(self._local_view(wr))
            apply_write(peer.regions[wr.remote.region_id], wr.remote.offset, data,
                        self.cluster.split_writes, self.cluster.rng)
            self.bump("bytes_written", len(data))
            peer.device.bump("bytes_in", len(data))
        elif wr.op == Opcode.READ:
            region = peer.regions[wr.remote.region_id]
            data = bytes(region.buffer[wr.remote.offset:wr.remote.offset + wr.length])
            self._local_view(wr)[:] = data
            self.bump("bytes_read", len(data))
        elif wr.op == Opcode.SEND:
            data = bytes(self._local_view(wr)) if wr.local is not None else b""
            peer.device.deliver_send(qp.remote, data, recv)
            self.bump("bytes_sent", len(data))

    def deliver_send(self, qp: QueuePair, data: bytes, recv: Optional[WorkRequest] = None,
                     wait: bool = False) -> None:
        """Match an incoming SEND to the next posted RECV of `qp`."""
        if recv is None:
            recv = qp.recv_queue.take()
        while recv is None:
            if not wait:
                self.bump("rnr")
                raise ReceiverNotReadyError(f"no receive posted for qp {qp.qp_id}")
            time.sleep(0.0005)
            recv = qp.recv_queue.take()
        if recv.local is None or recv.local.length < len(data):
            raise AccessFault(f"receive buffer too small for {len(data)} bytes on qp {qp.qp_id}")
        region = self.machine.regions[recv.local.region_id]
        region.buffer[recv.local.offset:recv.local.offset + len(data)] = data
        self.bump("bytes_in", len(data))
        self.bump("target_notifications")
        qp.recv_cq.push(CompletionEntry(qp.qp_id, recv.user_tag, Status.OK, Opcode.RECV, len(data)))


class Machine:
    def __init__(self, cluster: "Cluster", machine_id: int, zones: int):
        self.cluster = cluster
        self.machine_id = machine_id
        self.zones = zones
        self.regions: dict[int, MemoryRegion] = {}
        self.registered_bytes = 0
        self._next_region = 1
        self._next_base = 0x100000
        self._lock = threading.Lock()
        self.device = Device(self)

    def register_memory(self, zone: int, length: int) -> MemoryRegion:
        if length <= 0:
            raise VerbsError(f"cannot register {length} bytes")
        if not 0 <= zone < self.zones:
            raise UnknownZoneError(f"zone {zone} does not exist on m{self.machine_id} ({self.zones} zones)")
        with self._lock:
            if self.registered_bytes + length > self.cluster.registration_cap:
                raise RegistrationCapError(
                    f"m{self.machine_id}: registering {length} bytes exceeds cap {self.cluster.registration_cap}")
            region = MemoryRegion(self.machine_id, self._next_region, self._next_base, length, zone,
                                  bytearray(length))
            self.regions[region.region_id] = region
            self._next_region += 1
            self._next_base += (length + PAGE - 1) // PAGE * PAGE + PAGE
            self.registered_bytes += length
        self.device.bump("registrations")
        log.debug("m%d registered region %d (%d bytes, zone %d)", self.machine_id, region.region_id, length, zone)
        return region

    def region(self, region_id: int) -> MemoryRegion:
        try:
            return self.regions[region_id]
        except KeyError:
            raise AccessFault(f"region {region_id} is not registered on m{self.machine_id}") from None

    def __repr__(self) -> str:
        return f"Machine({self.machine_id}, zones={self.zones})"


class Cluster:
    """All simulated machines of one run, and the connections between them."""

    def __init__(self, *, u_max: int = 64, cq_depth: int = 4096, registration_cap: int = 1 << 30,
                 zones_per_machine: int = 2, backend: str = "inproc", delivery: str = "eager",
                 split_writes: bool = False, seed: int = 0):
        if backend not in ("inproc", "stream"):
            raise VerbsError(f"unknown backend '{backend}'")
        if delivery not in ("eager", "deferred"):
            raise VerbsError(f"unknown delivery mode '{delivery}'")
        self.u_max = u_max
        self.cq_depth = cq_depth
        self.registration_cap = registration_cap
        self.zones_per_machine = zones_per_machine
        self.backend = backend
        self.delivery = delivery
        self.split_writes = split_writes
        self.rng = random.Random(seed)
        self.machines: list[Machine] = []
        self._connected: set[tuple[int, int]] = set()
        self._links: dict[tuple[int, int], object] = {}
        self._next_qp = 1
        self._lock = threading.Lock()

    @classmethod
    def from_settings(cls, settings, machines: Optional[int] = None) -> "Cluster":
        cluster = cls(u_max=settings.u_max, cq_depth=settings.cq_depth,
                      registration_cap=settings.registration_cap,
                      zones_per_machine=settings.zones_per_machine, backend=settings.backend,
                      delivery=settings.delivery, split_writes=settings.split_writes, seed=settings.seed)
        for _ in range(machines if machines is not None else settings.machines):
            cluster.add_machine()
        return cluster

    def add_machine(self, zones: Optional[int] = None) -> Machine:
        with self._lock:
            machine = Machine(self, len(self.machines), zones or self.zones_per_machine)
            self.machines.append(machine)
        return machine

    def machine(self, machine_id: int) -> Machine:
        if not 0 <= machine_id < len(self.machines):
            raise UnknownMachineError(f"machine {machine_id} does not exist")
        return self.machines[machine_id]

    def completion_queue(self, name: str = "") -> CompletionQueue:
        return CompletionQueue(self.cq_depth, name)

    def _create_qp(self, machine: Machine, peer: int, u_max: int,
                   send_cq: Optional[CompletionQueue], recv_cq: Optional[CompletionQueue],
                   srq: Optional[SharedReceiveQueue]) -> QueuePair:
        with self._lock:
            qp_id = self._next_qp
            self._next_qp += 1
        qp = QueuePair(machine.device, qp_id, peer, u_max,
                       send_cq or self.completion_queue(f"qp{qp_id}.send"),
                       recv_cq or self.completion_queue(f"qp{qp_id}.recv"), srq)
        machine.device.qps[qp_id] = qp
        return qp

    def connect(self, a: int, b: int, config: Optional[QueuePairConfig] = None, *,
                send_cqs: tuple = (None, None), recv_cqs: tuple = (None, None),
                srqs: tuple = (None, None)) -> tuple[QueuePair, QueuePair]:
        config = config or QueuePairConfig(u_max=self.u_max)
        ma, mb = self.machine(a), self.machine(b)
        key = (min(a, b), max(a, b))
        with self._lock:
            if key in self._connected and not config.allow_duplicate:
                raise DuplicateConnectionError(f"m{a} and m{b} are already connected")
            self._connected.add(key)
        qa = self._create_qp(ma, b, config.u_max, send_cqs[0], recv_cqs[0], srqs[0])
        if self.backend == "stream":
            from .stream import StreamLink

            with self._lock:
                link = self._links.get(key)
                if link is None:
                    link = self._links[key] = StreamLink(self, key[0], key[1])
            qb = link.connect(qa, lambda u_max: self._create_qp(mb, a, u_max, send_cqs[1], recv_cqs[1], srqs[1]))
        else:
            qb = self._create_qp(mb, a, config.u_max, send_cqs[1], recv_cqs[1], srqs[1])
        qa.remote, qb.remote = qb, qa
        log.debug("connected %r <-> %r", qa, qb)
        return qa, qb

    def stats(self) -> Counter:
        total: Counter = Counter()
        for machine in self.machines:
            total.update(machine.device.stats)
        return total

    def progress(self) -> int:
        return sum(m.device.progress() for m in self.machines)

    def close(self) -> None:
        for link in list(self._links.values()):
            link.close()
        self._links.clear()


# --- Operation entry points ---

def register_memory(machine: Machine, zone: int, length: int) -> MemoryRegion:
    return machine.register_memory(zone, length)


def post(qp: QueuePair, wr: WorkRequest) -> PostReceipt:
    return qp.post(wr)


def poll(cq: CompletionQueue, max_entries: int = 16) -> list[CompletionEntry]:
    return cq.poll(max_entries)


def connect(cluster: Cluster, a: int, b: int,
            config: Optional[QueuePairConfig] = None) -> tuple[QueuePair, QueuePair]:
    return cluster.connect(a, b, config)
