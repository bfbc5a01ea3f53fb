# In fabricrpc/fabric/serialization.py
#
# Record layout (little-endian, 8-byte aligned):
#   total_length u32 | function_id u64 | context_length u32 (bit 31: payload present)
#   context bytes | [payload_length u32 | payload bytes] | zero padding | ready marker u8
# The marker is the last byte of the record.

import struct
from dataclasses import dataclass
from typing import Optional

from ..exceptions import SerializationError
from ..utils import align_up

HEADER = struct.Struct("<IQI")
PAYLOAD_LEN = struct.Struct("<I")
ENVELOPE = struct.Struct("<II")
HEADER_SIZE = HEADER.size + 1
MIN_RECORD = align_up(HEADER_SIZE)
READY = 0x5A
PAYLOAD_FLAG = 1 << 31
SERVICE_DEST = 0xFFFFFFFF


@dataclass(slots=True)
class ParsedCall:
    function_id: int
    context: memoryview
    payload: Optional[memoryview]
    total_length: int


def record_size(context_len: int, payload_len: Optional[int] = None) -> int:
    body = HEADER.size + context_len
    if payload_len is not None:
        body += PAYLOAD_LEN.size + payload_len
    return align_up(body + 1)


def serialize_into(view, at: int, function_id: int, context=b"", payload=None, *, ready: bool = True) -> int:
    """Write one record at `at` of a writable buffer; returns its total length."""
    ctx_len = len(context)
    if ctx_len >= PAYLOAD_FLAG:
        raise SerializationError(f"context of {ctx_len} bytes is too large")
    total = record_size(ctx_len, None if payload is None else len(payload))
    if at < 0 or at + total > len(view):
        raise SerializationError(f"record of {total} bytes does not fit at {at} of a {len(view)}-byte buffer")
    HEADER.pack_into(view, at, total, function_id, ctx_len | (PAYLOAD_FLAG if payload is not None else 0))
    pos = at + HEADER.size
    view[pos:pos + ctx_len] = context
    pos += ctx_len
    if payload is not None:
        PAYLOAD_LEN.pack_into(view, pos, len(payload))
        pos += PAYLOAD_LEN.size
        view[pos:pos + len(payload)] = payload
        pos += len(payload)
    end = at + total - 1
    view[pos:end] = bytes(end - pos)
    view[end] = READY if ready else 0
    return total


def serialize_call(function_id: int, context=b"", payload=None, *, capacity: Optional[int] = None) -> bytearray:
    """Build a record with its ready marker unset; `finalize` sets it."""
    total = record_size(len(context), None if payload is None else len(payload))
    if capacity is not None and total > capacity:
        raise SerializationError(f"record of {total} bytes exceeds capacity {capacity}")
    buf = bytearray(total)
    serialize_into(buf, 0, function_id, context, payload, ready=False)
    return buf


def finalize(buf, at: int = 0) -> None:
    total = struct.unpack_from("<I", buf, at)[0]
    buf[at + total - 1] = READY


def peek_record(view, at: int = 0, limit: Optional[int] = None) -> Optional[ParsedCall]:
    """Parse the record at `at` if it is fully present, else None.

    Raises SerializationError when the length prefix cannot describe a record.
    """
    limit = len(view) if limit is None else limit
    if at + HEADER.size > limit:
        return None
    total = struct.unpack_from("<I", view, at)[0]
    if total == 0:
        return None
    if total < MIN_RECORD or total % 8 or at + total > limit:
        raise SerializationError(f"malformed record length {total} at offset {at}")
    if view[at + total - 1] != READY:
        return None
    _, function_id, ctx_word = HEADER.unpack_from(view, at)
    ctx_len = ctx_word & ~PAYLOAD_FLAG
    pos = at + HEADER.size
    if pos + ctx_len + 1 > at + total:
        raise SerializationError(f"context length {ctx_len} overruns record at offset {at}")
    mv = memoryview(view)
    context = mv[pos:pos + ctx_len]
    pos += ctx_len
    payload = None
    if ctx_word & PAYLOAD_FLAG:
        plen = struct.unpack_from("<I", view, pos)[0]
        pos += PAYLOAD_LEN.size
        if pos + plen + 1 > at + total:
            raise SerializationError(f"payload length {plen} overruns record at offset {at}")
        payload = mv[pos:pos + plen]
    return ParsedCall(function_id, context, payload, total)


def parse_record(data) -> ParsedCall:
    call = peek_record(data, 0)
    if call is None:
        raise SerializationError("record is not ready")
    return call
