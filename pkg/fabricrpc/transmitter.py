# In fabricrpc/transmitter.py

import logging
import threading
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional

from .exceptions import AccessFault, DrainTimeoutError, ReceiverNotReadyError, VerbsError
from .regmem import RegisteredMemory, RemoteMemoryLocator
from .utils import AtomicCounter, spin_until
from .verbs import Opcode, PostReceipt, QueuePair, Status, WorkRequest

log = logging.getLogger(__name__)


class TicketStatus(IntEnum):
    OK = 0
    FAULT = 1
    BACKPRESSURE = 2


@dataclass(slots=True)
class Ticket:
    status: TicketStatus
    seq: int = -1
    epoch: int = -1
    signaled: bool = False
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == TicketStatus.OK


class Transmitter:
    """Shared-queue-pair transmitter with automatic selective signaling.

    Every thread may transmit concurrently. Unsignaled requests draw from a
    credit window of `u_max - 1`; a thread that finds the window empty posts its
    request signaled and hands the unsignaled count back as credits. Completed
    signal epochs advance the flush number k'; memory tagged with epoch f is
    reusable once k' > f.
    """

    def __init__(self, qp: QueuePair, *, reap_batch: int = 64,
                 pause_hook: Optional[Callable[[str], None]] = None):
        self.qp = qp
        self.u_max = qp.u_max
        self.reap_batch = reap_batch
        self.pause_hook = pause_hook
        self.ops = AtomicCounter()
        self.signaled_ops = AtomicCounter()
        self.faults = AtomicCounter()
        self._flushes = AtomicCounter()
        self._credits = AtomicCounter(qp.u_max - 1)
        self._posted_unsignaled = AtomicCounter()
        self._last_signaled = AtomicCounter()
        self._waiters: deque = deque()
        self._waiters_lock = threading.Lock()

    @property
    def qp_id(self) -> int:
        return self.qp.qp_id

    @property
    def peer(self) -> int:
        return self.qp.peer

    @property
    def flush_number(self) -> int:
        return self._flushes.load()

    def _pause(self, step: str) -> None:
        if self.pause_hook is not None:
            self.pause_hook(step)

    # --- Transmit ---

    def transmit(self, wr: WorkRequest, memory: Optional[RegisteredMemory] = None, sync=None) -> Ticket:
        self._pause("begin")
        try:
            if self._credits.fetch_sub(1) > 0:
                self._pause("credit")
                wr.signaled = False
                try:
                    receipt = self.qp.post(wr)
                except BaseException:
                    self._credits.fetch_add(1)
                    raise
                self._posted_unsignaled.fetch_add(1)
            else:
                self._credits.fetch_add(1)
                receipt = self._post_signaled(wr)
        except ReceiverNotReadyError as e:
            return Ticket(TicketStatus.BACKPRESSURE, detail=e.detail)
        except VerbsError as e:
            self.faults.fetch_add(1)
            log.warning("qp %d: transmit failed: %s", self.qp_id, e)
            return Ticket(TicketStatus.FAULT, detail=e.detail)

        self.ops.fetch_add(1)
        if memory is not None:
            memory.tag_with(self.qp_id, receipt.epoch)
        if sync is not None:
            with self._waiters_lock:
                if self._flushes.load() <= receipt.epoch:
                    self._waiters.append((receipt.epoch, sync))
                    sync = None
            if sync is not None:
                sync.notify()
        return Ticket(TicketStatus.OK, receipt.seq, receipt.epoch, receipt.signaled)

    def _post_signaled(self, wr: WorkRequest) -> PostReceipt:
        returned = self._posted_unsignaled.exchange(0)
        self._pause("exchange")
        wr.signaled = True
        try:
            receipt = self.qp.post(wr)
        except BaseException:
            self._posted_unsignaled.fetch_add(returned)
            raise
        self._credits.fetch_add(returned)
        self._last_signaled.max_update(receipt.epoch + 1)
        self.signaled_ops.fetch_add(1)
        self._pause("posted")
        self.reap()
        return receipt

    # --- Completions ---

    def reap(self) -> int:
        """Poll completions without blocking; advance k' and release waiters."""
        entries = self.qp.send_cq.poll(self.reap_batch)
        for entry in entries:
            if entry.status != Status.OK:
                self.faults.fetch_add(1)
                log.warning("qp %d: completion fault for request %d", self.qp_id, entry.seq)
            self._flushes.max_update(entry.signal_index + 1)
        if self._waiters:
            self._notify()
        return len(entries)

    def _notify(self) -> None:
        with self._waiters_lock:
            flushed = self._flushes.load()
            ready = [sync for epoch, sync in self._waiters if epoch < flushed]
            if ready:
                self._waiters = deque(w for w in self._waiters if w[0] >= flushed)
        for sync in ready:
            sync.notify()

    def flush(self, timeout: Optional[float] = None) -> None:
        """Make every request posted so far complete and advance k' past it."""
        target = self._last_signaled.load()
        if self._posted_unsignaled.load() > 0:
            try:
                receipt = self._post_signaled(WorkRequest.noop())
            except VerbsError:
                self.faults.fetch_add(1)
                raise
            target = max(target, receipt.epoch + 1)
        if self._flushes.load() >= target:
            if self._waiters:
                self._notify()
            return
        if not spin_until(lambda: self._flushes.load() >= target, timeout, on_idle=self.reap):
            raise DrainTimeoutError(f"qp {self.qp_id}: flush did not complete within {timeout}s")
        self.reap()

    def wait_epoch(self, epoch: int, timeout: Optional[float] = None) -> bool:
        if self._flushes.load() > epoch:
            return True
        self.flush(timeout)
        return self._flushes.load() > epoch

    # --- Helpers ---

    def _check_peer(self, remote: RemoteMemoryLocator) -> None:
        if remote.machine != self.qp.peer:
            raise AccessFault(f"locator on m{remote.machine} used on a queue pair to m{self.qp.peer}")

    def write(self, local: RegisteredMemory, remote: RemoteMemoryLocator, *,
              length: Optional[int] = None, sync=None) -> Ticket:
        self._check_peer(remote)
        n = local.length if length is None else length
        return self.transmit(WorkRequest(Opcode.WRITE, local.local_slice(0, n), remote.target()), local, sync)

    def read(self, local: RegisteredMemory, remote: RemoteMemoryLocator, *, sync=None) -> Ticket:
        self._check_peer(remote)
        n = min(local.length, remote.length)
        return self.transmit(WorkRequest(Opcode.READ, local.local_slice(0, n), remote.target()), local, sync)

    def send(self, local: RegisteredMemory, *, length: Optional[int] = None, sync=None) -> Ticket:
        n = local.length if length is None else length
        return self.transmit(WorkRequest(Opcode.SEND, local.local_slice(0, n)), local, sync)

    def __repr__(self) -> str:
        return f"Transmitter(qp={self.qp_id}, k={self.ops.load()}, k'={self.flush_number})"


class TransmitterSet:
    """Transmitters by queue pair id; calling the set yields a flush oracle."""

    def __init__(self):
        self._by_qp: dict[int, Transmitter] = {}

    def add(self, tx: Transmitter) -> Transmitter:
        self._by_qp[tx.qp_id] = tx
        return tx

    def __getitem__(self, qp_id: int) -> Transmitter:
        return self._by_qp[qp_id]

    def __call__(self, qp_id: int) -> int:
        tx = self._by_qp[qp_id]
        tx.reap()
        return tx.flush_number

    def __iter__(self):
        return iter(list(self._by_qp.values()))

    def __len__(self) -> int:
        return len(self._by_qp)

    def reap_all(self) -> int:
        return sum(tx.reap() for tx in self)

    def flush_all(self, timeout: Optional[float] = None) -> None:
        for tx in self:
            tx.flush(timeout)
