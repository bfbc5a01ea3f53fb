# In fabricrpc/games/base.py

import random
from abc import ABC, abstractmethod
from typing import Generic, Optional, TypeVar

S = TypeVar("S")

NONE = 0
P1 = 1
P2 = 2


def other(player: int) -> int:
    return P2 if player == P1 else P1


class GameSpec(ABC, Generic[S]):
    """What the search needs to know about a two-player game without draws."""

    name = "game"

    @abstractmethod
    def initial_state(self) -> S: ...

    @abstractmethod
    def legal_moves(self, state: S) -> list[int]: ...

    @abstractmethod
    def apply(self, state: S, move: int) -> S:
        """A new state with `move` played by the player to move."""

    @abstractmethod
    def winner(self, state: S) -> int:
        """P1, P2, or NONE while the game is open."""

    @abstractmethod
    def to_move(self, state: S) -> int: ...

    @abstractmethod
    def serialize(self, state: S) -> bytes: ...

    @abstractmethod
    def deserialize(self, data) -> S: ...

    def terminal(self, state: S) -> Optional[int]:
        won = self.winner(state)
        return won if won != NONE else None

    def random_playout(self, state: S, rng: random.Random, moves: Optional[list[int]] = None) -> int:
        """Play uniformly random legal moves until someone wins."""
        while True:
            won = self.winner(state)
            if won != NONE:
                return won
            legal = self.legal_moves(state)
            move = legal[rng.randrange(len(legal))]
            if moves is not None:
                moves.append(move)
            state = self.apply(state, move)


def evaluate(game: GameSpec, state, k: int, rng: random.Random, player: Optional[int] = None) -> int:
    """Wins for `player` out of `k` random playouts from `state`.

    `player` defaults to the one who moved into `state`.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    player = other(game.to_move(state)) if player is None else player
    won = game.winner(state)
    if won != NONE:
        return k if won == player else 0
    return sum(1 for _ in range(k) if game.random_playout(state, rng) == player)
