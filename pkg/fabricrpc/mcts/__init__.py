from .node import PENDING, UNEXPANDED, Node, NodeRef, RouteStep, pack_route, ucb_scores, ucb_select, unpack_route
from .search import Search, SearchFn, TreeShard

__all__ = [
    "PENDING", "UNEXPANDED", "Node", "NodeRef", "RouteStep", "pack_route", "ucb_scores", "ucb_select",
    "unpack_route", "Search", "SearchFn", "TreeShard",
]
