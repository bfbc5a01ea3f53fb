# In fabricrpc/mcts/search.py

import itertools
import logging
import random
import struct
import time
from collections import Counter
from enum import IntEnum
from typing import Iterator, Optional

from ..config import Settings
from ..fabric.calls import CallPolicy
from ..fabric.registry import Invocation
from ..fabric.system import SystemContext, ThreadContext, ThreadId
from ..games.base import P1, GameSpec, evaluate
from ..schemas import PhaseReport
from ..utils import AtomicCounter
from .node import PENDING, Node, NodeRef, RouteStep, pack_route, ucb_select, unpack_route

log = logging.getLogger(__name__)

NODE_ID = struct.Struct("<Q")
CHILD_READY_CTX = struct.Struct("<QHIQ")  # parent id, move, child owner, child id
OUTCOME = struct.Struct("<I")  # P1 wins out of sims_per_request


class SearchFn(IntEnum):
    SELECT = 0x4D00
    CREATE = 0x4D01
    CHILD_READY = 0x4D02
    SIMULATE = 0x4D03
    BACKPROP = 0x4D04


class TreeShard:
    """The nodes one thread owns, plus that thread's search counters."""

    def __init__(self, tid: ThreadId, seed: int):
        self.tid = tid
        self.rng = random.Random((seed << 20) ^ (tid.flat * 0x9E3779B1))
        self.nodes: dict[int, Node] = {}
        self.stats: Counter = Counter()
        self.owners: Counter = Counter()
        self._ids = itertools.count(1)

    def new_node(self, game: GameSpec, state, parent: Optional[RouteStep] = None) -> Node:
        node_id = next(self._ids)
        winner = game.winner(state)
        node = Node(NodeRef(self.tid.flat, node_id), state, game.to_move(state),
                    [] if winner else game.legal_moves(state), parent=parent, winner=winner)
        self.nodes[node_id] = node
        return node

    def clear(self) -> None:
        self.nodes.clear()


class Search:
    """
    Tree-parallel search spread over every thread of a system.

    Nodes live on the thread that created them and are only touched there;
    selection, expansion, simulation and backpropagation travel between
    owners as calls. Construct before the first thread attaches: the
    handlers are registered on every process.
    """

    def __init__(self, system: SystemContext, game: GameSpec, settings: Optional[Settings] = None):
        self.system = system
        self.game = game
        self.settings = settings or system.settings
        self.k = self.settings.sims_per_request
        self.c = self.settings.ucb_c
        self.remote_only = self.settings.mcts_remote_only
        self.shards = [TreeShard(tid, self.settings.seed) for tid in system.thread_ids]
        self.root: Optional[NodeRef] = None
        self.root_owner = 0
        self.phases = 0
        self.completed = AtomicCounter()
        system.register(SearchFn.SELECT, self._on_select, "mcts.select")
        system.register(SearchFn.CREATE, self._on_create, "mcts.create")
        system.register(SearchFn.CHILD_READY, self._on_child_ready, "mcts.child_ready")
        system.register(SearchFn.SIMULATE, self._on_simulate, "mcts.simulate")
        system.register(SearchFn.BACKPROP, self._on_backprop, "mcts.backprop")

    # --- Tree access (quiescent only) ---

    def reset(self, state=None) -> NodeRef:
        """Discard every node and plant a fresh root on the root owner."""
        for shard in self.shards:
            shard.clear()
        state = self.game.initial_state() if state is None else state
        self.root = self.shards[self.root_owner].new_node(self.game, state).ref
        return self.root

    def node(self, ref: NodeRef) -> Node:
        return self.shards[ref.owner].nodes[ref.node_id]

    @property
    def root_node(self) -> Node:
        if self.root is None:
            self.reset()
        return self.node(self.root)

    def nodes(self) -> Iterator[Node]:
        for shard in self.shards:
            yield from shard.nodes.values()

    @property
    def node_count(self) -> int:
        return sum(len(shard.nodes) for shard in self.shards)

    def check_consistency(self) -> list[str]:
        """Count conservation over the whole tree. Empty when the tree is consistent."""
        problems = []
        for node in self.nodes():
            if node.vis_n != sum(node.vis):
                problems.append(f"{node.ref}: VIS_n {node.vis_n} != sum of VIS_m {sum(node.vis)}")
            if node.deferred_count:
                problems.append(f"{node.ref}: {node.deferred_count} selections still deferred")
            for m, child in enumerate(node.children):
                if not 0 <= node.wins[m] <= self.k * node.vis[m]:
                    problems.append(f"{node.ref}: move {m} has WINS {node.wins[m]} for VIS {node.vis[m]}")
                if child is PENDING:
                    problems.append(f"{node.ref}: move {m} still pending")
                elif child is not None:
                    c = self.node(child)
                    if c.vis_n + c.leaf_visits != node.vis[m]:
                        problems.append(f"{child}: {c.vis_n} + {c.leaf_visits} visits but parent "
                                        f"counted {node.vis[m]}")
        return problems

    # --- Messaging ---

    def _send(self, ctx: ThreadContext, dest: int, fn: SearchFn, context: bytes, payload=None,
              policy: CallPolicy = CallPolicy.RETRY_ASYNC) -> None:
        target = self.system.thread_ids[dest]
        if not self.remote_only and target.process_flat == ctx.process.flat:
            calls = ctx.local
        else:
            calls = ctx.aggregator()
        if payload is None:
            calls.call(target, fn, context, policy=policy)
        else:
            calls.call_buffer(target, fn, context, payload, policy=policy)

    # --- Handlers ---

    def _on_select(self, inv: Invocation) -> None:
        shard = self.shards[inv.ctx.tid.flat]
        (node_id,) = NODE_ID.unpack_from(inv.context, 0)
        route = unpack_route(inv.context, NODE_ID.size)
        self._select(inv.ctx, shard, shard.nodes[node_id], route)

    def _select(self, ctx: ThreadContext, shard: TreeShard, node: Node, route: list[RouteStep]) -> None:
        shard.stats["selects"] += 1
        if node.terminal:
            node.leaf_visits += 1
            shard.stats["terminal_hits"] += 1
            self._backprop(ctx, shard, route, self.k if node.winner == P1 else 0)
            return
        open_moves = node.unexpanded
        if open_moves:
            m = open_moves[shard.rng.randrange(len(open_moves))]
            node.children[m] = PENDING
            node.vis[m] += 1
            node.vis_n += 1
            owner = shard.rng.randrange(self.system.n_threads)
            shard.owners[owner] += 1
            shard.stats["expansions"] += 1
            child_state = self.game.apply(node.state, node.moves[m])
            step = RouteStep(node.ref.owner, node.ref.node_id, m, node.player)
            self._send(ctx, owner, SearchFn.CREATE, pack_route(route + [step]), self.game.serialize(child_state))
            return
        m = ucb_select(node, self.c, self.k)
        route = route + [RouteStep(node.ref.owner, node.ref.node_id, m, node.player)]
        child = node.children[m]
        if child is PENDING:
            node.defer(m, route)
            shard.stats["deferred"] += 1
            return
        self._send(ctx, child.owner, SearchFn.SELECT, NODE_ID.pack(child.node_id) + pack_route(route))

    def _on_create(self, inv: Invocation) -> None:
        ctx = inv.ctx
        shard = self.shards[ctx.tid.flat]
        route = unpack_route(inv.context)
        parent = route[-1]
        state_blob = bytes(inv.payload)
        node = shard.new_node(self.game, self.game.deserialize(state_blob), parent)
        node.leaf_visits = 1
        shard.stats["created"] += 1
        self._send(ctx, parent.owner, SearchFn.CHILD_READY,
                   CHILD_READY_CTX.pack(parent.node_id, parent.move, node.ref.owner, node.ref.node_id))
        slots = ctx.process.slots
        simulator = slots[shard.rng.randrange(len(slots))].tid.flat
        self._send(ctx, simulator, SearchFn.SIMULATE, bytes(inv.context), state_blob)

    def _on_child_ready(self, inv: Invocation) -> None:
        ctx = inv.ctx
        shard = self.shards[ctx.tid.flat]
        parent_id, move, child_owner, child_id = CHILD_READY_CTX.unpack_from(inv.context, 0)
        waiting = shard.nodes[parent_id].resume(move, NodeRef(child_owner, child_id))
        for route in waiting:
            self._send(ctx, child_owner, SearchFn.SELECT, NODE_ID.pack(child_id) + pack_route(route))
        shard.stats["resumed"] += len(waiting)

    def _on_simulate(self, inv: Invocation) -> None:
        ctx = inv.ctx
        shard = self.shards[ctx.tid.flat]
        state = self.game.deserialize(inv.payload)
        p1_wins = evaluate(self.game, state, self.k, shard.rng, player=P1)
        shard.stats["simulations"] += 1
        self._backprop(ctx, shard, unpack_route(inv.context), p1_wins)

    def _on_backprop(self, inv: Invocation) -> None:
        shard = self.shards[inv.ctx.tid.flat]
        (p1_wins,) = OUTCOME.unpack_from(inv.context, 0)
        self._backprop(inv.ctx, shard, unpack_route(inv.context, OUTCOME.size), p1_wins)

    def _backprop(self, ctx: ThreadContext, shard: TreeShard, route: list[RouteStep], p1_wins: int) -> None:
        """Credit the route's tail steps owned here, then hand the rest to the next owner up."""
        me = ctx.tid.flat
        while route and route[-1].owner == me:
            step = route.pop()
            node = shard.nodes[step.node_id]
            node.wins[step.move] += p1_wins if step.player == P1 else self.k - p1_wins
            shard.stats["backprops"] += 1
        if route:
            self._send(ctx, route[-1].owner, SearchFn.BACKPROP, OUTCOME.pack(p1_wins) + pack_route(route))
            return
        shard.stats["completions"] += 1
        self.completed.fetch_add(1)

    # --- Phases ---

    def run_phase(self, cap: Optional[int] = None, *, timeout: Optional[float] = None,
                  time_limit: Optional[float] = None) -> PhaseReport:
        """Issue up to `cap` rollouts from the root owner's process and wait until every one drained.

        With `time_limit`, no rollout starts after that many seconds; the ones in flight still finish.
        """
        root = self.root if self.root is not None else self.reset()
        cap = self.settings.rollouts_per_phase_per_thread * self.system.n_threads if cap is None else cap
        root_node = self.node(root)
        root_process = self.system.thread_ids[root.owner].process_flat
        visits_before = root_node.vis_n + root_node.leaf_visits
        completed_before = self.completed.load()
        selects_before = [shard.stats["selects"] for shard in self.shards]
        sims_before = [shard.stats["simulations"] for shard in self.shards]
        issued = AtomicCounter()
        start_ctx = NODE_ID.pack(root.node_id)
        self.phases += 1
        log.info("phase %d: %d rollouts from p%d over %d threads", self.phases, cap, root_process,
                 self.system.n_threads)

        def body(ctx: ThreadContext) -> int:
            if ctx.tid.process_flat != root_process:
                return 0
            mine = 0
            while (stop_at is None or time.perf_counter() < stop_at) and issued.fetch_add(1) < cap:
                self._send(ctx, root.owner, SearchFn.SELECT, start_ctx, policy=CallPolicy.RETRY)
                mine += 1
                ctx.progress()
            return mine

        started = time.perf_counter()
        stop_at = None if time_limit is None else started + time_limit
        self.system.run_workers(body, timeout=timeout)
        elapsed = time.perf_counter() - started
        completions = self.completed.load() - completed_before
        best = root_node.best_move()
        report = PhaseReport(
            phase=self.phases,
            cap=cap,
            rollouts=completions,
            root_visits=root_node.vis_n + root_node.leaf_visits - visits_before,
            completions=completions,
            nodes=self.node_count,
            elapsed=elapsed,
            visits_per_thread=[s.stats["selects"] - b for s, b in zip(self.shards, selects_before)],
            completions_per_thread=[s.stats["simulations"] - b for s, b in zip(self.shards, sims_before)],
            best_move=None if best is None else root_node.moves[best],
        )
        log.info("phase %d done in %.3fs: %d visits, %d completions, %d nodes", report.phase, elapsed,
                 report.root_visits, report.completions, report.nodes)
        return report

    def play(self, phases: int, cap: Optional[int] = None, *, timeout: Optional[float] = None,
             time_limit: Optional[float] = None) -> list[PhaseReport]:
        """Search, commit the most visited root move, re-root on the new position; repeat."""
        reports = []
        for _ in range(phases):
            report = self.run_phase(cap, timeout=timeout, time_limit=time_limit)
            reports.append(report)
            root = self.root_node
            if report.best_move is None or root.terminal:
                break
            self.reset(self.game.apply(root.state, report.best_move))
            log.info("played %d; %d to move", report.best_move, self.game.to_move(self.root_node.state))
        return reports
