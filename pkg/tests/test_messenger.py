import random
import struct
import threading
import time
from collections import defaultdict

import pytest

from fabricrpc.exceptions import OwnershipError
from fabricrpc.fabric import CallPolicy

SEQ_FN = 0x200
SEQ = struct.Struct("<Q")
RECORD = 24  # a call with an 8-byte context
SMALL_CHUNKS = dict(chunk_size=4096, agg_flush_bytes=1024)


@pytest.fixture
def small(make_system):
    return make_system(machines=2, threads_per_process=2, c=2, c_max=4, **SMALL_CHUNKS)


def test_setup_grants_c_chunks(small):
    ctx = small.init_thread(0)
    try:
        channel = ctx.messenger.get(2)
        assert len(channel.ring) == 2
        assert ctx.messenger.get(2) is channel
        assert len(small.processes[1].slots[0].incoming) == 1
    finally:
        ctx.finalize()


def test_grow_until_c_max(make_system):
    system = make_system(machines=2, c=2, c_max=6, **SMALL_CHUNKS)
    ctx = system.init_thread(0)
    try:
        channel = ctx.messenger.get(2)
        assert channel.grow()
        assert channel.grow()
        assert len(channel.ring) == 6
        assert not channel.grow()
        assert channel.stats["grows"] == 2
    finally:
        ctx.finalize()


def test_records_arrive_in_order_across_laps(small):
    seen = []
    small.register(SEQ_FN, lambda inv: seen.append(SEQ.unpack(inv.context)[0]))

    def body(ctx):
        if ctx.tid.flat != 0:
            return
        calls = ctx.messenger
        for i in range(2000):
            calls.call(2, SEQ_FN, SEQ.pack(i), policy=CallPolicy.RETRY)

    small.run_workers(body, timeout=60)
    assert seen == list(range(2000))
    receiver = small.processes[1].slots[0].ctx.receivers[0]
    assert receiver.stats["chunks_done"] > 4
    assert not receiver.faulted
    # Senders learn the consumed offset by push; nothing is read back.
    assert small.cluster.machine(0).device.stats["posts_READ"] == 0


def test_stalled_receiver_blocks_at_c_max(small):
    hits = []
    small.register(SEQ_FN, lambda inv: hits.append(SEQ.unpack(inv.context)[0]))
    release = threading.Event()
    per_chunk = (4096 - 64) // RECORD

    def body(ctx):
        if ctx.tid.flat == 2:
            # Receiver does not poll until the sender hits the limit.
            assert release.wait(15.0)
            return None
        if ctx.tid.flat != 0:
            return None
        try:
            sent = 0
            while ctx.messenger.call(2, SEQ_FN, SEQ.pack(sent)):
                sent += 1
            channel = ctx.messenger.get(2)
            state = (sent, len(channel.ring), channel.stats["blocked"])
        finally:
            release.set()
        for i in range(sent, sent + 100):
            ctx.messenger.call(2, SEQ_FN, SEQ.pack(i), policy=CallPolicy.RETRY)
        return state

    results = small.run_workers(body, timeout=60)
    sent, ring_len, blocked = results[0]
    assert sent == 4 * per_chunk
    assert ring_len == 4
    assert blocked >= 1
    assert hits == list(range(sent + 100))

    sender = small.processes[0].slots[0].ctx.messenger.channels[2]
    receiver = small.processes[1].slots[0].ctx.receivers[0]
    assert sender.ring_ids() == receiver.ring_ids()


def test_two_senders_one_receiver(small):
    seen = defaultdict(list)
    small.register(SEQ_FN, lambda inv: seen[inv.src.flat].append(SEQ.unpack(inv.context)[0]))

    def body(ctx):
        if ctx.tid.flat not in (0, 1):
            return
        for i in range(300):
            ctx.messenger.call(2, SEQ_FN, SEQ.pack(i), policy=CallPolicy.RETRY)

    small.run_workers(body, timeout=60)
    assert seen == {0: list(range(300)), 1: list(range(300))}
    assert set(small.processes[1].slots[0].ctx.receivers) == {0, 1}


def test_shutdown_closes_the_channel(small):
    hits = []
    small.register(SEQ_FN, lambda inv: hits.append(1))

    def body(ctx):
        if ctx.tid.flat != 0:
            return None
        for _ in range(10):
            ctx.messenger.call(2, SEQ_FN, SEQ.pack(0), policy=CallPolicy.RETRY)
        channel = ctx.messenger.get(2)
        channel.shutdown()
        channel.shutdown()
        return ctx.messenger.call(2, SEQ_FN, SEQ.pack(0))

    results = small.run_workers(body, timeout=30)
    assert results[0] is False
    assert len(hits) == 10
    receiver = small.processes[1].slots[0].ctx.receivers[0]
    assert small.contexts()[0].messenger.channels[2].closed
    assert receiver.closed


def test_shutdown_all(make_system):
    system = make_system(machines=2, processes_per_machine=2, threads_per_process=2, **SMALL_CHUNKS)
    hits = []
    system.register(SEQ_FN, lambda inv: hits.append(inv.ctx.tid.flat))

    def body(ctx):
        if ctx.tid.flat != 0:
            return None
        for dest in range(1, 8):
            ctx.messenger.call(dest, SEQ_FN, SEQ.pack(0), policy=CallPolicy.RETRY)
        return ctx.messenger.shutdown_all()

    results = system.run_workers(body, timeout=30)
    assert results[0] == 7
    assert sorted(hits) == list(range(1, 8))
    for ctx in system.contexts()[1:]:
        assert ctx.receivers[0].closed


def test_channels_have_a_single_owner(small):
    ctx = small.init_thread(0)
    errors = []

    def other():
        try:
            ctx.messenger.get(2)
        except OwnershipError as e:
            errors.append(e)

    try:
        t = threading.Thread(target=other)
        t.start()
        t.join()
        assert len(errors) == 1
    finally:
        ctx.finalize()


@pytest.mark.parametrize("count", [5000, pytest.param(100_000, marks=pytest.mark.slow)])
def test_split_writes_never_run_partial_records(make_system, count):
    system = make_system(machines=2, split_writes=True, c=2, c_max=4, **SMALL_CHUNKS)
    seen = []
    system.register(SEQ_FN, lambda inv: seen.append(SEQ.unpack(inv.context)[0]))

    def body(ctx):
        if ctx.tid.flat != 0:
            return
        for i in range(count):
            ctx.messenger.call(2, SEQ_FN, SEQ.pack(i), policy=CallPolicy.RETRY)

    system.run_workers(body, timeout=300)
    assert seen == list(range(count))
    assert not system.processes[1].slots[0].ctx.receivers[0].faulted


@pytest.mark.slow
def test_stream_integrity_with_a_pausing_receiver(make_system):
    system = make_system(machines=2, chunk_size=64 << 10, c=2, c_max=16)
    seen = []
    pauses = random.Random(4)

    def record(inv):
        seen.append(SEQ.unpack(inv.context)[0])
        if pauses.random() < 0.0005:
            time.sleep(0.005)

    system.register(SEQ_FN, record)
    payload = bytes(28)  # with the 8-byte context this fills a 64-byte record

    def body(ctx):
        if ctx.tid.flat != 0:
            return 0
        for i in range(100_000):
            ctx.messenger.call_buffer(2, SEQ_FN, SEQ.pack(i), payload, policy=CallPolicy.RETRY)
        return len(ctx.messenger.channels[2].ring)

    results = system.run_workers(body, timeout=600)
    assert seen == list(range(100_000))
    assert results[0] <= 16
    assert system.cluster.machine(0).device.stats["posts_READ"] == 0
