from .base import NONE, P1, P2, GameSpec, evaluate, other
from .hex import HexBoard, HexGame

GAMES = {"hex": HexGame}

__all__ = ["NONE", "P1", "P2", "GameSpec", "evaluate", "other", "HexBoard", "HexGame", "GAMES"]
