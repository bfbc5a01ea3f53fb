import hashlib
import random
import struct
import threading
from collections import Counter

import pytest

from fabricrpc.config import Settings
from fabricrpc.exceptions import ChannelError, FabricError, RegistryError, SystemInitError
from fabricrpc.fabric import (
    CallPolicy,
    SendInvoker,
    Synchronizer,
    SyncMode,
    SysFn,
    current_system,
    current_thread,
    finalize_thread,
    init_system,
    init_thread,
    shutdown_system,
    subtree_size,
    tree_children,
)
from fabricrpc.fabric.chunks import CHUNK_ALLOC_ARGS, REMOTE_ALLOC_ARGS
from fabricrpc.fabric.serialization import ENVELOPE
from fabricrpc.regmem import RemoteMemoryLocator
from fabricrpc.utils import spin_until

INCR = 0x100
SEQ_FN = 0x101
BUF_FN = 0x102
ANSWER = 0x103
FLAG = 0x104
BOOM = 0x105

SEQ = struct.Struct("<Q")
U64 = struct.Struct("<Q")

REMOTE_PATHS = ["send", "write", "trad", "ovfl"]
REMOTE = 2  # first thread on machine 1 in the default system fixture


def on_thread(flat, fn):
    def body(ctx):
        if ctx.tid.flat == flat:
            return fn(ctx)
        return None
    return body


def fresh(ctx, length):
    return ctx.process.arenas.zone_alloc(ctx.process.zone, length)


# --- System and thread lifecycle ---

def test_flat_ids_are_dense(make_system):
    system = make_system(machines=2, processes_per_machine=2, threads_per_process=2)
    ids = system.thread_ids
    assert [t.flat for t in ids] == list(range(8))
    assert [(t.machine, t.process, t.thread) for t in ids[:3]] == [(0, 0, 0), (0, 0, 1), (0, 1, 0)]
    assert ids[7].process_flat == 3
    assert len(system.processes) == 4


def test_init_thread_twice(system):
    ctx = system.init_thread(0)
    try:
        with pytest.raises(SystemInitError):
            system.init_thread(0)
        with pytest.raises(SystemInitError):
            system.init_thread(1)
    finally:
        ctx.finalize()


def test_init_thread_bad_offset(system):
    with pytest.raises(SystemInitError):
        system.processes[0].init_thread(5)


def test_registry_frozen_after_first_thread(system):
    ctx = system.init_thread(0)
    try:
        with pytest.raises(RegistryError):
            system.register(0x999, lambda inv: None)
    finally:
        ctx.finalize()


def test_unknown_thread(system):
    with pytest.raises(FabricError):
        system.resolve(99)


def test_module_level_lifecycle():
    system = init_system(Settings.build(threads_per_process=1, recv_buffers=16))
    try:
        with pytest.raises(SystemInitError):
            init_system(Settings.build(threads_per_process=1, recv_buffers=16))
        ctx = init_thread(0)
        assert current_thread() is ctx
        assert current_system() is system
        finalize_thread()
        with pytest.raises(SystemInitError):
            current_thread()
    finally:
        shutdown_system()
    with pytest.raises(SystemInitError):
        current_system()


# --- call ---

@pytest.mark.parametrize("path", REMOTE_PATHS)
def test_call_runs_exactly_once(system, path):
    hits = Counter()
    system.register(INCR, lambda inv: hits.update([inv.ctx.tid.flat]))

    def issue(ctx):
        calls = ctx.calls(path)
        for _ in range(1000):
            calls.call(REMOTE, INCR, policy=CallPolicy.RETRY)

    system.run_workers(on_thread(0, issue), timeout=60)
    assert hits == Counter({REMOTE: 1000})
    assert system.inflight.load() == 0


@pytest.mark.parametrize("policy", [CallPolicy.RETRY, CallPolicy.RETRY_ASYNC])
@pytest.mark.parametrize("path", REMOTE_PATHS)
def test_calls_run_in_issue_order(system, path, policy):
    seen = []
    system.register(SEQ_FN, lambda inv: seen.append(SEQ.unpack(inv.context)[0]))

    def issue(ctx):
        calls = ctx.calls(path)
        for i in range(500):
            calls.call(REMOTE, SEQ_FN, SEQ.pack(i), policy=policy)

    system.run_workers(on_thread(0, issue), timeout=60)
    assert seen == list(range(500))


def test_local_path_within_process(system):
    seen = []
    system.register(SEQ_FN, lambda inv: seen.append((inv.ctx.tid.flat, SEQ.unpack(inv.context)[0])))

    def issue(ctx):
        for i in range(50):
            ctx.local.call(1, SEQ_FN, SEQ.pack(i))

    system.run_workers(on_thread(0, issue), timeout=30)
    assert seen == [(1, i) for i in range(50)]


def test_local_path_rejects_other_process(system):
    ctx = system.init_thread(0)
    try:
        with pytest.raises(ChannelError):
            ctx.local.call(REMOTE, SEQ_FN)
    finally:
        ctx.finalize()


@pytest.mark.parametrize("path", ["send", "write", "local"])
def test_call_to_self_goes_through_the_queue(make_system, path):
    system = make_system(threads_per_process=1)
    seen = []
    system.register(SEQ_FN, lambda inv: seen.append((inv.src.flat, SEQ.unpack(inv.context)[0])))

    def issue(ctx):
        calls = ctx.calls(path)
        for i in range(10):
            calls.call(0, SEQ_FN, SEQ.pack(i), policy=CallPolicy.RETRY)

    system.run_workers(issue, timeout=30)
    assert seen == [(0, i) for i in range(10)]


def test_handler_errors_do_not_stall(system):
    def boom(inv):
        raise RuntimeError("handler failure")

    system.register(BOOM, boom)

    def issue(ctx):
        calls = ctx.calls("write")
        calls.call(REMOTE, BOOM, policy=CallPolicy.RETRY)
        calls.call(REMOTE, 0x7777, policy=CallPolicy.RETRY)

    system.run_workers(on_thread(0, issue), timeout=30)
    receiver = system.processes[1].slots[0].ctx
    assert receiver.stats["handler_errors"] == 2
    assert system.inflight.load() == 0


# --- call_buffer variants ---

def digest(data) -> str:
    return hashlib.sha256(bytes(data)).hexdigest()


@pytest.mark.parametrize("path", REMOTE_PATHS)
def test_buffer_inside_call(system, path):
    got = []
    system.register(BUF_FN, lambda inv: got.append(digest(inv.payload)))
    pattern = random.Random(5).randbytes(1024)

    def issue(ctx):
        ctx.calls(path).call_buffer(REMOTE, BUF_FN, b"", pattern, policy=CallPolicy.RETRY)

    system.run_workers(on_thread(0, issue), timeout=30)
    assert got == [digest(pattern)]


@pytest.mark.parametrize("path", ["send", "write"])
def test_buffer_written_before_invocation(make_system, path):
    system = make_system(machines=2, threads_per_process=1, split_writes=True)
    got = []
    system.register(BUF_FN, lambda inv: got.append(bytes(inv.payload)))
    rng = random.Random(8)
    patterns = [rng.randbytes(1024) for _ in range(10)]

    def issue(ctx):
        calls = ctx.calls(path)
        for pattern in patterns:
            orig = fresh(ctx, len(pattern))
            orig.write(pattern)
            dest_buffer = ctx.remote_alloc(1, len(pattern))
            assert dest_buffer.machine == 1
            calls.call_buffer_write(1, BUF_FN, b"", orig, dest_buffer, policy=CallPolicy.RETRY)

    system.run_workers(on_thread(0, issue), timeout=30)
    assert got == patterns


@pytest.mark.parametrize("async_fetch", [False, True])
def test_buffer_read_by_callee(system, async_fetch):
    got = []
    system.register(BUF_FN, lambda inv: got.append(bytes(inv.payload)))
    rng = random.Random(9)
    patterns = [rng.randbytes(512) for _ in range(5)]

    def issue(ctx):
        calls = ctx.calls("write")
        for pattern in patterns:
            orig = fresh(ctx, len(pattern))
            orig.write(pattern)
            calls.call_buffer_read(REMOTE, BUF_FN, b"", orig, policy=CallPolicy.RETRY, async_fetch=async_fetch)

    system.run_workers(on_thread(0, issue), timeout=30)
    if async_fetch:
        assert sorted(got) == sorted(patterns)
    else:
        assert got == patterns


SHAPES = {2: dict(machines=2, threads_per_process=1),
          8: dict(machines=2, processes_per_machine=2, threads_per_process=2),
          16: dict(machines=2, processes_per_machine=2, threads_per_process=4)}


@pytest.mark.parametrize("path", ["send", "write"])
@pytest.mark.parametrize("n", sorted(SHAPES))
def test_all_to_all_buffers(make_system, n, path):
    system = make_system(**SHAPES[n])
    assert len(system.thread_ids) == n
    lock = threading.Lock()
    seen = Counter()
    corrupt = []

    def check(inv):
        src, i = struct.unpack("<II", inv.context)
        body = bytes(inv.payload)
        with lock:
            seen[(src, inv.ctx.tid.flat, i)] += 1
            if body != bytes([src ^ i & 0xFF]) * 40:
                corrupt.append((src, i))

    system.register(BUF_FN, check)

    def issue(ctx):
        me = ctx.tid.flat
        sync = Synchronizer()
        calls = ctx.calls(path)
        for i in range(10):
            for dest in range(n):
                if dest != me:
                    calls.call_buffer(dest, BUF_FN, struct.pack("<II", me, i), bytes([me ^ i & 0xFF]) * 40,
                                      sync=sync, policy=CallPolicy.RETRY)
        return ctx.wait(sync, 20) and sync.balanced

    results = system.run_workers(issue, timeout=120)
    assert all(results)
    assert corrupt == []
    expected = {(s, d, i) for s in range(n) for d in range(n) if s != d for i in range(10)}
    assert set(seen) == expected
    assert set(seen.values()) == {1}


# --- call_return ---

def test_call_return_writes_back(system):
    system.register(ANSWER, lambda inv: U64.pack(42))

    def issue(ctx):
        origin = fresh(ctx, 8)
        sync = Synchronizer()
        ctx.calls("write").call_return(REMOTE, ANSWER, b"", origin, sync=sync, policy=CallPolicy.RETRY)
        assert ctx.wait(sync, 10)
        return U64.unpack(origin.read())[0], sync.failures.load()

    results = system.run_workers(on_thread(0, issue), timeout=30)
    assert results[0] == (42, 0)


def test_concurrent_call_returns_keep_their_origins(system):
    system.register(ANSWER, lambda inv: U64.pack(U64.unpack(inv.context)[0] * 3 + 1))

    def issue(ctx):
        sync = Synchronizer()
        origins = []
        for i in range(16):
            origin = fresh(ctx, 8)
            origins.append(origin)
            ctx.calls("send").call_return(REMOTE, ANSWER, U64.pack(i), origin, sync=sync,
                                          policy=CallPolicy.RETRY)
        assert ctx.wait(sync, 10)
        return [U64.unpack(o.read())[0] for o in origins]

    results = system.run_workers(on_thread(0, issue), timeout=30)
    assert results[0] == [i * 3 + 1 for i in range(16)]


def test_call_return_with_bad_origin_reports_failure(system):
    system.register(ANSWER, lambda inv: U64.pack(42))

    def issue(ctx):
        sync = Synchronizer()
        # A locator on the callee's machine cannot be the caller's origin.
        bogus = RemoteMemoryLocator(1, 1, 0, 8)
        ctx.calls("write").call_return(REMOTE, ANSWER, b"", bogus, sync=sync, policy=CallPolicy.RETRY)
        assert ctx.wait(sync, 10)
        return sync.failures.load()

    results = system.run_workers(on_thread(0, issue), timeout=30)
    assert results[0] == 1


# --- broadcast ---

@pytest.mark.parametrize("path", ["send", "write"])
def test_broadcast_reaches_every_thread(make_system, path):
    system = make_system(machines=2, processes_per_machine=2, threads_per_process=2)
    flags = [0] * 8

    def flag(inv):
        flags[inv.ctx.tid.flat] += 1

    system.register(FLAG, flag)

    def issue(ctx):
        sync = Synchronizer()
        ctx.calls(path).broadcast(FLAG, b"", sync=sync, policy=CallPolicy.RETRY)
        return ctx.wait(sync, 10)

    results = system.run_workers(on_thread(0, issue), timeout=30)
    assert results[0] is True
    assert flags == [1] * 8
    forwards = [ctx.stats["bcast_forwards"] for ctx in system.contexts()]
    assert sum(forwards) == 7
    assert max(forwards) <= 2


@pytest.mark.parametrize("n", range(1, 33))
@pytest.mark.parametrize("arity", [1, 2, 3, 4])
def test_broadcast_tree_covers_every_thread_once(n, arity):
    for root in {0, n // 2, n - 1}:
        reached = Counter([root])
        for node in range(n):
            children = tree_children(node, root, n, arity)
            assert len(children) <= arity
            reached.update(children)
        assert reached == Counter(range(n))
        assert subtree_size(root, root, n, arity) == n


BCAST_SHAPES = {1: dict(threads_per_process=1),
                5: dict(threads_per_process=5),
                17: dict(machines=1, processes_per_machine=1, threads_per_process=17),
                32: dict(machines=2, processes_per_machine=2, threads_per_process=8)}


@pytest.mark.parametrize("arity", [2, 3])
@pytest.mark.parametrize("n", sorted(BCAST_SHAPES))
def test_broadcast_fan_out(make_system, n, arity):
    system = make_system(broadcast_arity=arity, **BCAST_SHAPES[n])
    lock = threading.Lock()
    flags = Counter()

    def flag(inv):
        with lock:
            flags[inv.ctx.tid.flat] += 1

    system.register(FLAG, flag)

    def issue(ctx):
        sync = Synchronizer()
        ctx.calls("send").broadcast(FLAG, b"", sync=sync, policy=CallPolicy.RETRY)
        return ctx.wait(sync, 30), sync.failures.load()

    results = system.run_workers(on_thread(n - 1, issue), timeout=120)
    assert results[n - 1] == (True, 0)
    assert flags == Counter(range(n))
    forwards = [ctx.stats["bcast_forwards"] for ctx in system.contexts()]
    assert sum(forwards) == n - 1
    assert max(forwards) <= arity


def test_lost_subtree_is_reported_to_the_caller(make_system, monkeypatch):
    system = make_system(machines=2, processes_per_machine=2, threads_per_process=2)
    flags = [0] * 8
    system.register(FLAG, lambda inv: flags.__setitem__(inv.ctx.tid.flat, flags[inv.ctx.tid.flat] + 1))
    submit = SendInvoker._submit

    def unreachable_from_1_to_3(self, dest, function_id, context, payload, sync):
        if self.ctx.tid.flat == 1 and dest.flat == 3 and function_id == SysFn.BCAST:
            raise ChannelError("link to t3 is down")
        return submit(self, dest, function_id, context, payload, sync)

    monkeypatch.setattr(SendInvoker, "_submit", unreachable_from_1_to_3)

    def issue(ctx):
        sync = Synchronizer()
        accepted = ctx.calls("send").broadcast(FLAG, b"", sync=sync, policy=CallPolicy.RETRY)
        return accepted, ctx.wait(sync, 10), sync.failures.load(), sync.balanced

    results = system.run_workers(on_thread(0, issue), timeout=30)
    # Binary tree from t0: t1 forwards to t3 and t4, t3 forwards to t7.
    assert results[0] == (True, True, 2, True)
    assert flags == [1, 1, 1, 0, 1, 1, 1, 0]
    assert system.contexts()[1].stats["bcast_lost"] == 2


def test_broadcast_buffer_from_a_non_zero_root(make_system):
    system = make_system(machines=1, threads_per_process=7)
    got = {}
    system.register(FLAG, lambda inv: got.__setitem__(inv.ctx.tid.flat, bytes(inv.payload)))

    def issue(ctx):
        ctx.calls("write").broadcast_buffer(FLAG, b"", b"payload", policy=CallPolicy.RETRY)

    system.run_workers(on_thread(3, issue), timeout=30)
    assert got == {flat: b"payload" for flat in range(7)}


def test_broadcast_single_thread(make_system):
    system = make_system(threads_per_process=1)
    flags = [0]
    system.register(FLAG, lambda inv: flags.__setitem__(0, flags[0] + 1))

    system.run_workers(lambda ctx: ctx.calls("send").broadcast(FLAG, policy=CallPolicy.RETRY), timeout=30)
    assert flags == [1]
    assert system.contexts()[0].stats["bcast_forwards"] == 0


# --- Synchronizers ---

def test_remote_consume_sync_waits_for_handlers(system):
    ran = []
    system.register(INCR, lambda inv: ran.append(inv.ctx.tid.flat))

    def issue(ctx):
        sync = Synchronizer(SyncMode.ON_REMOTE_CONSUME)
        for _ in range(5):
            ctx.calls("ovfl").call(REMOTE, INCR, sync=sync, policy=CallPolicy.RETRY)
        assert ctx.wait(sync, 10)
        return len(ran), sync.balanced

    results = system.run_workers(on_thread(0, issue), timeout=30)
    assert results[0] == (5, True)


def test_remote_consume_sync_with_slots(system):
    ran = []
    system.register(INCR, lambda inv: ran.append(inv.ctx.tid.flat))

    def issue(ctx):
        slots = fresh(ctx, 8 * 4)
        slots.zero()
        sync = Synchronizer(SyncMode.ON_REMOTE_CONSUME, slots=slots)
        for _ in range(3):
            ctx.calls("write").call(REMOTE, INCR, sync=sync, policy=CallPolicy.RETRY)
        assert ctx.wait(sync, 10)
        return len(ran), sync.failures.load(), sync.balanced

    results = system.run_workers(on_thread(0, issue), timeout=30)
    assert results[0] == (3, 0, True)


@pytest.mark.parametrize("path", REMOTE_PATHS)
def test_transmit_sync(system, path):
    system.register(INCR, lambda inv: None)

    def issue(ctx):
        sync = Synchronizer()
        for _ in range(20):
            ctx.calls(path).call(REMOTE, INCR, sync=sync, policy=CallPolicy.RETRY)
        return ctx.wait(sync, 10)

    results = system.run_workers(on_thread(0, issue), timeout=30)
    assert results[0] is True


# --- Finalization ---

def test_finalize_hands_staged_calls_over(system):
    hits = Counter()
    system.register(INCR, lambda inv: hits.update([inv.ctx.tid.flat]))

    def issue(ctx):
        for _ in range(5):
            ctx.calls("trad").call(REMOTE, INCR)
        return ctx.aggregator("trad").empty

    results = system.run_workers(on_thread(0, issue), timeout=30)
    assert results[0] is False
    assert hits == Counter({REMOTE: 5})


# --- Service thread ---

def test_chunk_alloc_service_needs_no_worker(system):
    reply = system.processes[0].request(1, SysFn.CHUNK_ALLOC, CHUNK_ALLOC_ARGS.pack(0, 0, 2, 4096))
    size = RemoteMemoryLocator.SIZE
    locs = [RemoteMemoryLocator.unpack(reply, i * size) for i in range(len(reply) // size)]
    assert len(locs) == 2
    assert all(loc.machine == 1 and loc.length == 4096 for loc in locs)

    grant = system.processes[1].slots[0].incoming.take_grow(0)
    assert len(grant.chunks) == 2
    assert all(slot.ctx is None for p in system.processes for slot in p.slots)


def test_worker_directed_message_lands_in_queue(system):
    assert system.processes[0].send_message(REMOTE, 0, INCR, b"hi")
    slot = system.processes[1].slots[0]
    assert spin_until(lambda: len(slot.queue) == 1, 5.0)
    delivery = slot.queue.pop()
    assert (delivery.src, delivery.function_id, delivery.context) == (0, INCR, b"hi")
    system.inflight.fetch_sub(1)


def test_concurrent_service_calls_from_two_machines(make_system):
    system = make_system(machines=3, threads_per_process=1)
    replies = {}

    def ask(origin):
        replies[origin] = system.processes[origin].request(2, SysFn.REMOTE_ALLOC, REMOTE_ALLOC_ARGS.pack(0, 256))

    threads = [threading.Thread(target=ask, args=(p,)) for p in (0, 1)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    locs = [RemoteMemoryLocator.unpack(replies[p]) for p in (0, 1)]
    assert all(loc.machine == 2 and loc.length == 256 for loc in locs)
    assert (locs[0].region_id, locs[0].offset) != (locs[1].region_id, locs[1].offset)


def test_malformed_message_is_skipped(system):
    sender = system.processes[0]
    seg = sender.segment(32)
    seg.write(ENVELOPE.pack(REMOTE, 0) + struct.pack("<I", 12) + bytes(20))
    assert sender.transmitter_to(1).send(seg, length=32).ok

    target = system.processes[1]
    assert spin_until(lambda: target.stats["malformed"] == 1, 5.0)
    # The service thread keeps serving after the bad record.
    reply = sender.request(1, SysFn.REMOTE_ALLOC, REMOTE_ALLOC_ARGS.pack(0, 64))
    assert len(reply) == RemoteMemoryLocator.SIZE


def test_service_error_travels_back(system):
    with pytest.raises(FabricError):
        system.processes[0].request(1, SysFn.REMOTE_ALLOC, REMOTE_ALLOC_ARGS.pack(9, 64))
