# In fabricrpc/games/hex.py
#
# Cells are row-major, index = r * n + c. P1 connects row 0 to row n-1,
# P2 connects column 0 to column n-1.

import random
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

from ..exceptions import SerializationError
from .base import NONE, P1, P2, GameSpec, other

EMPTY = NONE

_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, 1), (1, -1))


@lru_cache(maxsize=32)
def neighbors(n: int) -> tuple[tuple[int, ...], ...]:
    table = []
    for r in range(n):
        for c in range(n):
            table.append(tuple((r + dr) * n + c + dc for dr, dc in _STEPS
                               if 0 <= r + dr < n and 0 <= c + dc < n))
    return tuple(table)


@dataclass(slots=True)
class HexBoard:
    n: int
    cells: bytes
    to_move: int = P1

    @classmethod
    def empty(cls, n: int) -> "HexBoard":
        return cls(n, bytes(n * n), P1)

    @classmethod
    def from_rows(cls, rows: list[str], to_move: Optional[int] = None) -> "HexBoard":
        """'1', '2' or '.' per cell; `to_move` defaults to whoever the stone counts say."""
        n = len(rows)
        cells = bytes({"1": P1, "2": P2}.get(ch, EMPTY) for row in rows for ch in row.replace(" ", ""))
        if len(cells) != n * n:
            raise ValueError(f"expected {n} rows of {n} cells")
        if to_move is None:
            to_move = P1 if cells.count(P1) == cells.count(P2) else P2
        return cls(n, cells, to_move)

    def at(self, r: int, c: int) -> int:
        return self.cells[r * self.n + c]

    @property
    def valid(self) -> bool:
        return self.cells.count(P1) - self.cells.count(P2) in (0, 1)

    def legal_moves(self) -> list[int]:
        return [i for i, cell in enumerate(self.cells) if cell == EMPTY]

    def play(self, move: int) -> "HexBoard":
        if self.cells[move] != EMPTY:
            raise ValueError(f"cell {move} is not empty")
        cells = bytearray(self.cells)
        cells[move] = self.to_move
        return HexBoard(self.n, bytes(cells), other(self.to_move))

    def winner(self) -> int:
        n = self.n
        if self._connected(P1, [c for c in range(n)], lambda i: i // n == n - 1):
            return P1
        if self._connected(P2, [r * n for r in range(n)], lambda i: i % n == n - 1):
            return P2
        return NONE

    def _connected(self, player: int, starts: list[int], is_goal) -> bool:
        table = neighbors(self.n)
        seen = {i for i in starts if self.cells[i] == player}
        todo = deque(seen)
        while todo:
            i = todo.popleft()
            if is_goal(i):
                return True
            for j in table[i]:
                if j not in seen and self.cells[j] == player:
                    seen.add(j)
                    todo.append(j)
        return False

    def serialize(self) -> bytes:
        return bytes((self.n, self.to_move)) + self.cells

    @classmethod
    def deserialize(cls, data) -> "HexBoard":
        data = bytes(data)
        if len(data) < 2:
            raise SerializationError("hex state shorter than its header")
        n, to_move = data[0], data[1]
        cells = data[2:]
        if len(cells) != n * n or to_move not in (P1, P2) or any(cell > P2 for cell in cells):
            raise SerializationError(f"malformed {n}x{n} hex state of {len(data)} bytes")
        return cls(n, cells, to_move)

    def __str__(self) -> str:
        marks = {EMPTY: ".", P1: "1", P2: "2"}
        return "\n".join(" " * r + " ".join(marks[self.at(r, c)] for c in range(self.n)) for r in range(self.n))


class _Links:
    """Union-find over the cells plus four virtual edge nodes."""

    __slots__ = ("parent", "top", "bottom", "left", "right")

    def __init__(self, n: int):
        size = n * n
        self.parent = list(range(size + 4))
        self.top, self.bottom, self.left, self.right = size, size + 1, size + 2, size + 3

    def find(self, i: int) -> int:
        parent = self.parent
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


def _place(links: _Links, cells: bytearray, n: int, table, i: int, player: int) -> int:
    cells[i] = player
    r, c = divmod(i, n)
    if player == P1:
        if r == 0:
            links.union(i, links.top)
        if r == n - 1:
            links.union(i, links.bottom)
    else:
        if c == 0:
            links.union(i, links.left)
        if c == n - 1:
            links.union(i, links.right)
    for j in table[i]:
        if cells[j] == player:
            links.union(i, j)
    if player == P1 and links.find(links.top) == links.find(links.bottom):
        return P1
    if player == P2 and links.find(links.left) == links.find(links.right):
        return P2
    return NONE


def random_playout(board: HexBoard, rng: random.Random, moves: Optional[list[int]] = None) -> int:
    """Uniformly random moves until a player connects; returns the winner."""
    n = board.n
    table = neighbors(n)
    links = _Links(n)
    cells = bytearray(n * n)
    won = NONE
    for i, cell in enumerate(board.cells):
        if cell != EMPTY:
            won = _place(links, cells, n, table, i, cell) or won
    if won != NONE:
        return won
    empties = board.legal_moves()
    rng.shuffle(empties)
    player = board.to_move
    for i in empties:
        if moves is not None:
            moves.append(i)
        won = _place(links, cells, n, table, i, player)
        if won != NONE:
            return won
        player = other(player)
    raise ValueError("board filled without a winner")


class HexGame(GameSpec[HexBoard]):
    name = "hex"

    def __init__(self, n: int = 7):
        if not 1 <= n <= 25:
            raise ValueError("hex board side must be in 1..25")
        self.n = n

    def initial_state(self) -> HexBoard:
        return HexBoard.empty(self.n)

    def legal_moves(self, state: HexBoard) -> list[int]:
        if state.winner() != NONE:
            return []
        return state.legal_moves()

    def apply(self, state: HexBoard, move: int) -> HexBoard:
        return state.play(move)

    def winner(self, state: HexBoard) -> int:
        return state.winner()

    def to_move(self, state: HexBoard) -> int:
        return state.to_move

    def serialize(self, state: HexBoard) -> bytes:
        return state.serialize()

    def deserialize(self, data) -> HexBoard:
        return HexBoard.deserialize(data)

    def random_playout(self, state: HexBoard, rng: random.Random, moves: Optional[list[int]] = None) -> int:
        return random_playout(state, rng, moves)
