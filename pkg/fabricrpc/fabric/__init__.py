from .calls import CallPolicy, LocalCalls, RemoteCalls, SendInvoker, subtree_size, tree_children
from .registry import SYSTEM_BASE, FunctionRegistry, Invocation, SysFn
from .serialization import ParsedCall, parse_record, peek_record, record_size, serialize_call, serialize_into
from .sync import SyncGroup, Synchronizer, SyncMode
from .system import (
    ProcessContext,
    SystemContext,
    ThreadContext,
    ThreadId,
    current_system,
    current_thread,
    finalize_thread,
    init_system,
    init_thread,
    shutdown_system,
)

__all__ = [
    "CallPolicy", "LocalCalls", "RemoteCalls", "SendInvoker", "subtree_size", "tree_children",
    "SYSTEM_BASE", "FunctionRegistry", "Invocation", "SysFn",
    "ParsedCall", "parse_record", "peek_record", "record_size", "serialize_call", "serialize_into",
    "SyncGroup", "Synchronizer", "SyncMode",
    "ProcessContext", "SystemContext", "ThreadContext", "ThreadId",
    "current_system", "current_thread", "finalize_thread", "init_system", "init_thread", "shutdown_system",
]
