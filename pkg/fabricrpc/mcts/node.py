# In fabricrpc/mcts/node.py

import math
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional

ROUTE_STEP = struct.Struct("<IQHH")  # owner flat, node id, move index, player to move at the node


class NodeRef(NamedTuple):
    owner: int
    node_id: int


class _Pending:
    __slots__ = ()

    def __repr__(self) -> str:
        return "PENDING"


PENDING = _Pending()
UNEXPANDED = None


class RouteStep(NamedTuple):
    owner: int
    node_id: int
    move: int
    player: int


def pack_route(route: list[RouteStep]) -> bytes:
    return b"".join(ROUTE_STEP.pack(*step) for step in route)


def unpack_route(data, at: int = 0) -> list[RouteStep]:
    size = ROUTE_STEP.size
    if (len(data) - at) % size:
        raise ValueError(f"route of {len(data) - at} bytes is not a whole number of steps")
    return [RouteStep(*ROUTE_STEP.unpack_from(data, i)) for i in range(at, len(data), size)]


@dataclass(slots=True)
class Node:
    """
    One search node, touched only by its owner thread.

    `vis_n` counts selections that went through the node; `leaf_visits`
    counts rollouts that ended at it (its creation, or a visit to a terminal
    state). Slot `m` of `children` is UNEXPANDED, PENDING or a NodeRef.
    """

    ref: NodeRef
    state: Any
    player: int
    moves: list[int]
    parent: Optional[RouteStep] = None
    winner: int = 0
    children: list = field(default_factory=list)
    vis: list[int] = field(default_factory=list)
    wins: list[int] = field(default_factory=list)
    vis_n: int = 0
    leaf_visits: int = 0
    deferred: dict[int, deque] = field(default_factory=dict)

    def __post_init__(self):
        if not self.children:
            k = len(self.moves)
            self.children = [UNEXPANDED] * k
            self.vis = [0] * k
            self.wins = [0] * k

    @property
    def terminal(self) -> bool:
        return self.winner != 0 or not self.moves

    @property
    def unexpanded(self) -> list[int]:
        return [m for m, child in enumerate(self.children) if child is UNEXPANDED]

    def defer(self, move: int, continuation) -> None:
        self.deferred.setdefault(move, deque()).append(continuation)

    def resume(self, move: int, child: NodeRef) -> list:
        """Record the child's location; returns the selections that waited on it, oldest first."""
        if self.children[move] is not PENDING:
            raise ValueError(f"move {move} of {self.ref} is not pending")
        self.children[move] = child
        waiting = self.deferred.pop(move, deque())
        return list(waiting)

    @property
    def deferred_count(self) -> int:
        return sum(len(q) for q in self.deferred.values())

    def best_move(self) -> Optional[int]:
        """Most visited move, lowest index on ties."""
        if not self.vis:
            return None
        return max(range(len(self.vis)), key=lambda m: (self.vis[m], -m))


def ucb_scores(wins: list[int], vis: list[int], vis_n: int, c: float, k: int = 1) -> list[float]:
    explore = math.log(max(vis_n, 1))
    return [w / (k * v) + c * math.sqrt(explore / v) for w, v in zip(wins, vis)]


def ucb_select(node: Node, c: float, k: int = 1) -> int:
    """Highest UCB move, lowest index on ties; counts the selection (virtual loss) on the node."""
    scores = ucb_scores(node.wins, node.vis, node.vis_n, c, k)
    best = max(range(len(scores)), key=lambda m: (scores[m], -m))
    node.vis[best] += 1
    node.vis_n += 1
    return best
