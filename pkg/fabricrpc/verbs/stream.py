# In fabricrpc/verbs/stream.py
#
# Framed byte-stream backend. Every one-sided operation and every SEND travels
# as a frame over a socket; the peer's reader thread applies it to local memory.

import logging
import queue
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional

from ..exceptions import VerbsError
from .types import CompletionEntry, Opcode, Status, WorkRequest

log = logging.getLogger(__name__)

MAGIC = 0x53524D41
HEADER = struct.Struct("<IBIIQI")
CONNECT_BODY = struct.Struct("<III")


class MsgType(IntEnum):
    SEND = 1
    WRITE = 2
    READ_REQ = 3
    READ_RESP = 4
    CONNECT = 5
    CONNECT_ACK = 6


# READ_REQ carries a length but no payload bytes.
_NO_PAYLOAD = {MsgType.READ_REQ}


@dataclass(slots=True)
class Frame:
    msg_type: MsgType
    qp_id: int
    region_id: int = 0
    offset: int = 0
    length: int = 0
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    length = frame.length if frame.msg_type in _NO_PAYLOAD else len(frame.payload)
    header = HEADER.pack(MAGIC, int(frame.msg_type), frame.qp_id, frame.region_id, frame.offset, length)
    if frame.msg_type in _NO_PAYLOAD:
        return header
    return header + frame.payload


class FrameDecoder:
    """Incremental decoder; feed raw socket bytes, get complete frames back."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while len(self._buf) >= HEADER.size:
            magic, msg_type, qp_id, region_id, offset, length = HEADER.unpack_from(self._buf)
            if magic != MAGIC:
                raise VerbsError(f"bad frame magic 0x{magic:08x}", code="bad_frame")
            try:
                msg_type = MsgType(msg_type)
            except ValueError:
                raise VerbsError(f"unknown frame type {msg_type}", code="bad_frame") from None
            body = 0 if msg_type in _NO_PAYLOAD else length
            if len(self._buf) < HEADER.size + body:
                break
            payload = bytes(self._buf[HEADER.size:HEADER.size + body])
            del self._buf[:HEADER.size + body]
            frames.append(Frame(msg_type, qp_id, region_id, offset, length, payload))
        return frames


class LinkEndpoint:
    """One side of a link: a writer thread drains `_out`, a reader thread applies
    incoming frames to the memory of `machine`."""

    def __init__(self, link: "StreamLink", machine, sock: socket.socket, name: str):
        self.link = link
        self.machine = machine
        self.sock = sock
        self.name = name
        self.peer: Optional["LinkEndpoint"] = None
        self._out: queue.SimpleQueue = queue.SimpleQueue()
        self._reads: deque = deque()
        self._acks: deque = deque()
        self._closed = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, name=f"{name}-rx", daemon=True)
        self._writer = threading.Thread(target=self._write_loop, name=f"{name}-tx", daemon=True)

    def start(self) -> None:
        self._reader.start()
        self._writer.start()

    def send_frame(self, frame: Frame) -> None:
        self._out.put(encode_frame(frame))

    # --- Outbound ---

    def transmit(self, qp, wr: WorkRequest, seq: int, epoch: int) -> None:
        """Called under the source device lock, in post order."""
        device = qp.device
        peer_qp = qp.remote.qp_id
        if wr.op == Opcode.WRITE and not wr.is_noop:
            data = bytes(device._local_view(wr))
            self.send_frame(Frame(MsgType.WRITE, peer_qp, wr.remote.region_id, wr.remote.offset, len(data), data))
            device.bump("bytes_written", len(data))
        elif wr.op == Opcode.SEND:
            data = bytes(device._local_view(wr)) if wr.local is not None else b""
            self.send_frame(Frame(MsgType.SEND, peer_qp, 0, 0, len(data), data))
            device.bump("bytes_sent", len(data))
        elif wr.op == Opcode.READ:
            self._reads.append((qp, wr, seq, epoch))
            self.send_frame(Frame(MsgType.READ_REQ, peer_qp, wr.remote.region_id, wr.remote.offset, wr.length))
            return
        if wr.signaled:
            # Zero-length read round trip: its response implies everything before it landed.
            self._reads.append((qp, wr, seq, epoch))
            self.send_frame(Frame(MsgType.READ_REQ, peer_qp, 0, 0, 0))

    def _complete(self, qp, wr: WorkRequest, seq: int, epoch: int, payload: bytes) -> None:
        if wr.op == Opcode.READ:
            qp.device._local_view(wr)[:] = payload
            qp.device.bump("bytes_read", len(payload))
        if wr.signaled:
            qp.send_cq.push(CompletionEntry(qp.qp_id, wr.user_tag, Status.OK, wr.op, wr.length, seq, epoch))

    # --- Inbound ---

    def _apply(self, frame: Frame) -> None:
        from .device import apply_write

        if frame.msg_type == MsgType.WRITE:
            region = self.machine.region(frame.region_id)
            apply_write(region, frame.offset, frame.payload, self.link.cluster.split_writes, self.link.cluster.rng)
            self.machine.device.bump("bytes_in", len(frame.payload))
        elif frame.msg_type == MsgType.SEND:
            qp = self.machine.device.qps[frame.qp_id]
            self.machine.device.deliver_send(qp, frame.payload, wait=True)
        elif frame.msg_type == MsgType.READ_REQ:
            data = b""
            if frame.length:
                region = self.machine.region(frame.region_id)
                data = bytes(region.buffer[frame.offset:frame.offset + frame.length])
            self.send_frame(Frame(MsgType.READ_RESP, frame.qp_id, frame.region_id, frame.offset, len(data), data))
        elif frame.msg_type == MsgType.READ_RESP:
            qp, wr, seq, epoch = self._reads.popleft()
            self._complete(qp, wr, seq, epoch, frame.payload)
        elif frame.msg_type == MsgType.CONNECT:
            _machine, initiator_qp, u_max = CONNECT_BODY.unpack(frame.payload)
            factory = self.link.take_factory(initiator_qp)
            qp = factory(u_max)
            qp.link = self
            body = CONNECT_BODY.pack(self.machine.machine_id, qp.qp_id, u_max)
            self.send_frame(Frame(MsgType.CONNECT_ACK, initiator_qp, 0, 0, len(body), body))
        elif frame.msg_type == MsgType.CONNECT_ACK:
            _machine, qp_id, _u_max = CONNECT_BODY.unpack(frame.payload)
            waiter = self._acks.popleft()
            waiter["qp_id"] = qp_id
            waiter["event"].set()

    def _read_loop(self) -> None:
        decoder = FrameDecoder()
        while not self._closed.is_set():
            try:
                data = self.sock.recv(1 << 16)
            except OSError:
                break
            if not data:
                break
            try:
                for frame in decoder.feed(data):
                    self._apply(frame)
            except Exception:
                log.exception("%s: failed to apply inbound frame", self.name)
                break

    def _write_loop(self) -> None:
        while True:
            data = self._out.get()
            if data is None:
                break
            try:
                self.sock.sendall(data)
            except OSError:
                break

    def close(self) -> None:
        self._closed.set()
        self._out.put(None)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class StreamLink:
    """A socket pair joining machines `a` and `b` (possibly the same machine)."""

    def __init__(self, cluster, a: int, b: int):
        self.cluster = cluster
        left, right = socket.socketpair()
        self.ends = (LinkEndpoint(self, cluster.machine(a), left, f"link{a}-{b}.a"),
                     LinkEndpoint(self, cluster.machine(b), right, f"link{a}-{b}.b"))
        self.ends[0].peer, self.ends[1].peer = self.ends[1], self.ends[0]
        self._factories: dict[int, Callable] = {}
        self._lock = threading.Lock()
        for end in self.ends:
            end.start()

    def endpoint_on(self, machine_id: int) -> LinkEndpoint:
        return self.ends[0] if self.ends[0].machine.machine_id == machine_id else self.ends[1]

    def take_factory(self, qp_id: int) -> Callable:
        with self._lock:
            return self._factories.pop(qp_id)

    def connect(self, qa, make_peer: Callable, timeout: float = 5.0):
        """Handshake over the wire; returns the peer queue pair created remotely."""
        end = self.endpoint_on(qa.machine_id)
        qa.link = end
        with self._lock:
            self._factories[qa.qp_id] = make_peer
        waiter = {"event": threading.Event(), "qp_id": None}
        end._acks.append(waiter)
        body = CONNECT_BODY.pack(qa.machine_id, qa.qp_id, qa.u_max)
        end.send_frame(Frame(MsgType.CONNECT, qa.qp_id, 0, 0, len(body), body))
        if not waiter["event"].wait(timeout):
            raise VerbsError(f"connect handshake for qp {qa.qp_id} timed out")
        return end.peer.machine.device.qps[waiter["qp_id"]]

    def close(self) -> None:
        for end in self.ends:
            end.close()
