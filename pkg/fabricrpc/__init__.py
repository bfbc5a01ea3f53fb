"""Remote invocation over a simulated verbs fabric, with a distributed MCTS on top."""

from .config import Settings, settings
from .exceptions import FabricError

__version__ = "0.3.0"

__all__ = ["Settings", "settings", "FabricError", "__version__"]
