from .device import (
    Cluster,
    CompletionQueue,
    Device,
    Machine,
    QueuePair,
    SharedReceiveQueue,
    apply_write,
    connect,
    poll,
    post,
    register_memory,
)
from .types import (
    CompletionEntry,
    LocalSlice,
    MemoryRegion,
    Opcode,
    PostReceipt,
    RemoteTarget,
    Status,
    WorkRequest,
)

__all__ = [
    "Cluster", "CompletionQueue", "Device", "Machine", "QueuePair", "SharedReceiveQueue",
    "apply_write", "connect", "poll", "post", "register_memory",
    "CompletionEntry", "LocalSlice", "MemoryRegion", "Opcode", "PostReceipt", "RemoteTarget",
    "Status", "WorkRequest",
]
