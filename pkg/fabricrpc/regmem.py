# In fabricrpc/regmem.py

import bisect
import logging
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Union

from .exceptions import AllocationError, OwnershipError, RegistrationCapError, UnknownZoneError
from .utils import align_up
from .verbs import LocalSlice, Machine, MemoryRegion, RemoteTarget

log = logging.getLogger(__name__)

LOCATOR = struct.Struct("<IIQQ")


class _WouldBlock:
    __slots__ = ()

    def __bool__(self) -> bool:
        return False

    def __repr__(self) -> str:
        return "WOULD_BLOCK"


WOULD_BLOCK = _WouldBlock()

FlushOracle = Callable[[int], int]


@dataclass(slots=True, frozen=True)
class RemoteMemoryLocator:
    machine: int
    region_id: int
    offset: int
    length: int

    SIZE = LOCATOR.size

    def pack(self) -> bytes:
        return LOCATOR.pack(self.machine, self.region_id, self.offset, self.length)

    @classmethod
    def unpack(cls, data, at: int = 0) -> "RemoteMemoryLocator":
        return cls(*LOCATOR.unpack_from(data, at))

    def target(self, at: int = 0) -> RemoteTarget:
        return RemoteTarget(self.region_id, self.offset + at)

    def sub(self, at: int, length: int) -> "RemoteMemoryLocator":
        return RemoteMemoryLocator(self.machine, self.region_id, self.offset + at, length)


class RegisteredMemory:
    """A slice of a registered region plus its recycling tags (qp_id -> signal epoch).

    Segments share their parent's tags: tagging a segment tags the unit it lives in.
    """

    __slots__ = ("region", "offset", "length", "tags", "parent", "holds", "_held")

    def __init__(self, region: MemoryRegion, offset: int, length: int,
                 parent: Optional["RegisteredMemory"] = None):
        self.region = region
        self.offset = offset
        self.length = length
        self.tags: dict[int, int] = {}
        self.parent = parent
        self.holds = 0
        self._held = False

    @property
    def machine(self) -> int:
        return self.region.machine

    @property
    def zone(self) -> int:
        return self.region.zone

    @property
    def relative_offset(self) -> int:
        return self.offset - self.parent.offset if self.parent is not None else 0

    @property
    def tag(self) -> Optional[tuple[int, int]]:
        tags = (self.parent or self).tags
        if not tags:
            return None
        qp_id = max(tags, key=tags.get)
        return qp_id, tags[qp_id]

    @property
    def held(self) -> bool:
        """True while this segment pins its unit: carved but not yet tagged or released."""
        return self._held

    def view(self, at: int = 0, length: Optional[int] = None) -> memoryview:
        length = self.length - at if length is None else length
        start = self.offset + at
        return memoryview(self.region.buffer)[start:start + length]

    def write(self, data, at: int = 0) -> None:
        n = len(data)
        if at < 0 or at + n > self.length:
            raise AllocationError(f"write of {n} bytes at {at} overruns a {self.length}-byte block")
        start = self.offset + at
        self.region.buffer[start:start + n] = data

    def read(self, at: int = 0, length: Optional[int] = None) -> bytes:
        length = self.length - at if length is None else length
        start = self.offset + at
        return bytes(self.region.buffer[start:start + length])

    def zero(self) -> None:
        self.region.buffer[self.offset:self.offset + self.length] = bytes(self.length)

    def local_slice(self, at: int = 0, length: Optional[int] = None) -> LocalSlice:
        return LocalSlice(self.region.region_id, self.offset + at, self.length - at if length is None else length)

    def locator(self, at: int = 0, length: Optional[int] = None) -> RemoteMemoryLocator:
        return RemoteMemoryLocator(self.region.machine, self.region.region_id, self.offset + at,
                                   self.length - at if length is None else length)

    def segment(self, at: int, length: int) -> "RegisteredMemory":
        seg = RegisteredMemory(self.region, self.offset + at, length, parent=self)
        self.holds += 1
        seg._held = True
        return seg

    # --- Recycling ---

    def tag_with(self, qp_id: int, epoch: int) -> None:
        """Record that a transport operation on `qp_id` in signal epoch `epoch` uses this memory."""
        target = self.parent or self
        if target.tags.get(qp_id, -1) < epoch:
            target.tags[qp_id] = epoch
        self.release()

    def release(self) -> None:
        if self._held:
            self._held = False
            if self.parent is not None:
                self.parent.holds -= 1

    def is_free(self, flush_number: FlushOracle) -> bool:
        if self.holds:
            return False
        return all(flush_number(qp_id) > epoch for qp_id, epoch in self.tags.items())

    def clear_tags(self) -> None:
        self.tags.clear()

    def __repr__(self) -> str:
        return (f"RegisteredMemory(m{self.region.machine} r{self.region.region_id} "
                f"+{self.offset} len={self.length} tags={self.tags})")


#####################################################################
# Zone arenas

class ZoneArena:
    """Slab-registered memory for one zone. Shared by all threads of a process."""

    def __init__(self, machine: Machine, zone: int, slab_size: int = 1 << 20, cap_bytes: Optional[int] = None):
        self.machine = machine
        self.zone = zone
        self.slab_size = slab_size
        self.cap_bytes = cap_bytes
        self.slabs: list[MemoryRegion] = []
        self._bump = slab_size
        self._free: list[list[int]] = []
        self._lock = threading.Lock()

    @property
    def registered_bytes(self) -> int:
        return len(self.slabs) * self.slab_size

    def alloc(self, length: int) -> RegisteredMemory:
        if length <= 0:
            raise AllocationError(f"cannot allocate {length} bytes")
        if length > self.slab_size:
            raise AllocationError(f"{length} bytes exceeds the slab size {self.slab_size}")
        carved = align_up(length)
        with self._lock:
            for i, (slab, offset, size) in enumerate(self._free):
                if size >= carved:
                    if size == carved:
                        del self._free[i]
                    else:
                        self._free[i] = [slab, offset + carved, size - carved]
                    return RegisteredMemory(self.slabs[slab], offset, length)
            if self._bump + carved > self.slab_size:
                self._new_slab()
            region = self.slabs[-1]
            offset = self._bump
            self._bump += carved
        return RegisteredMemory(region, offset, length)

    def free(self, mem: RegisteredMemory) -> None:
        """Return a block; it merges with free neighbours in its slab, and with the bump space."""
        slab = next((i for i, region in enumerate(self.slabs) if region is mem.region), None)
        if slab is None:
            raise AllocationError(f"{mem!r} was not allocated from zone {self.zone}")
        mem.zero()
        with self._lock:
            free = self._free
            i = bisect.bisect_left(free, [slab, mem.offset, 0])
            free.insert(i, [slab, mem.offset, align_up(mem.length)])
            if i + 1 < len(free) and free[i + 1][0] == slab and free[i][1] + free[i][2] == free[i + 1][1]:
                free[i][2] += free[i + 1][2]
                del free[i + 1]
            if i > 0 and free[i - 1][0] == slab and free[i - 1][1] + free[i - 1][2] == free[i][1]:
                free[i - 1][2] += free[i][2]
                del free[i]
                i -= 1
            if slab == len(self.slabs) - 1 and free[i][1] + free[i][2] == self._bump:
                self._bump = free[i][1]
                del free[i]

    @property
    def free_blocks(self) -> list[tuple[int, int, int]]:
        """(slab index, offset, size) of every free block below the bump pointer."""
        with self._lock:
            return [tuple(b) for b in self._free]

    def _new_slab(self) -> None:
        if self.cap_bytes is not None and self.registered_bytes + self.slab_size > self.cap_bytes:
            raise AllocationError(f"zone {self.zone} arena cap of {self.cap_bytes} bytes reached")
        try:
            region = self.machine.register_memory(self.zone, self.slab_size)
        except RegistrationCapError as e:
            raise AllocationError(f"zone {self.zone}: {e.detail}") from e
        self.slabs.append(region)
        self._bump = 0
        log.debug("zone %d on m%d: new slab %d (%d slabs)", self.zone, self.machine.machine_id,
                  region.region_id, len(self.slabs))


class MachineArenas:
    """One arena per zone of a machine, created on first use."""

    def __init__(self, machine: Machine, slab_size: int = 1 << 20, cap_bytes: Optional[int] = None):
        self.machine = machine
        self.slab_size = slab_size
        self.cap_bytes = cap_bytes
        self._arenas: dict[int, ZoneArena] = {}
        self._lock = threading.Lock()

    def arena(self, zone: int) -> ZoneArena:
        if not 0 <= zone < self.machine.zones:
            raise UnknownZoneError(f"zone {zone} does not exist on m{self.machine.machine_id}")
        with self._lock:
            arena = self._arenas.get(zone)
            if arena is None:
                arena = self._arenas[zone] = ZoneArena(self.machine, zone, self.slab_size, self.cap_bytes)
        return arena

    def zone_alloc(self, zone: int, length: int) -> RegisteredMemory:
        return self.arena(zone).alloc(length)

    def zone_free(self, mem: RegisteredMemory) -> None:
        self.arena(mem.zone).free(mem)

    @property
    def slab_count(self) -> int:
        return sum(len(a.slabs) for a in self._arenas.values())


#####################################################################
# Circular allocators

class CircularAllocator:
    """A ring of equal units; a unit comes back only once every queue pair that
    used it has flushed past its tag. Single owner."""

    def __init__(self, arena: ZoneArena, unit_size: int, flush_number: FlushOracle, *,
                 initial: int = 4, growth: str = "exponential", max_units: int = 64,
                 debug_ownership: bool = True):
        if growth not in ("none", "linear", "exponential"):
            raise AllocationError(f"unknown ring growth policy '{growth}'")
        if unit_size > arena.slab_size:
            raise AllocationError(f"unit size {unit_size} exceeds slab size {arena.slab_size}")
        self.arena = arena
        self.unit_size = unit_size
        self.flush_number = flush_number
        self.initial = initial
        self.growth = growth
        self.max_units = max(max_units, initial)
        self.debug_ownership = debug_ownership
        self.units: list[RegisteredMemory] = [arena.alloc(unit_size) for _ in range(initial)]
        self.cursor = 0
        self.blocked = 0
        self._owner: Optional[int] = None

    def _check_owner(self) -> None:
        if not self.debug_ownership:
            return
        me = threading.get_ident()
        if self._owner is None:
            self._owner = me
        elif self._owner != me:
            raise OwnershipError("circular allocator used from a thread other than its owner")

    def alloc(self) -> Union[RegisteredMemory, _WouldBlock]:
        self._check_owner()
        unit = self.units[self.cursor]
        if unit.is_free(self.flush_number):
            unit.clear_tags()
            self.cursor = (self.cursor + 1) % len(self.units)
            return unit
        if not self._grow():
            self.blocked += 1
            return WOULD_BLOCK
        unit = self.units[self.cursor]
        self.cursor = (self.cursor + 1) % len(self.units)
        return unit

    def _grow(self) -> bool:
        have = len(self.units)
        if self.growth == "none" or have >= self.max_units:
            return False
        extra = have if self.growth == "exponential" else self.initial
        extra = min(extra, self.max_units - have)
        fresh = [self.arena.alloc(self.unit_size) for _ in range(extra)]
        self.units[self.cursor:self.cursor] = fresh
        log.debug("circular ring grew %d -> %d units", have, len(self.units))
        return True

    def __len__(self) -> int:
        return len(self.units)


class LinearCircularAllocator:
    """Packs variable-length segments into consecutive units of a circular allocator."""

    def __init__(self, ring: CircularAllocator):
        self.ring = ring
        self.unit_size = ring.unit_size
        self._unit: Optional[RegisteredMemory] = None
        self._used = 0

    def alloc(self, length: int) -> Union[RegisteredMemory, _WouldBlock]:
        if length <= 0 or length > self.unit_size:
            raise AllocationError(f"segment of {length} bytes does not fit a {self.unit_size}-byte unit")
        if self._unit is None or self._used + length > self.unit_size:
            unit = self.ring.alloc()
            if unit is WOULD_BLOCK:
                return WOULD_BLOCK
            if self._unit is not None:
                self._unit.holds -= 1
            unit.holds += 1
            self._unit, self._used = unit, 0
        seg = self._unit.segment(self._used, length)
        self._used += length
        return seg

    def free(self, seg: RegisteredMemory) -> None:
        """Give back a segment that was never transmitted.

        The segment's hold on its unit is dropped. When it is the last segment
        carved from the unit still being packed, its bytes are carved again.
        """
        unit = seg.parent
        if unit is None:
            raise AllocationError(f"{seg!r} is not a packed segment")
        untagged = seg.held
        seg.release()
        if untagged and unit is self._unit and seg.relative_offset + seg.length == self._used:
            self._used = seg.relative_offset


#####################################################################
# General allocator

class GeneralAllocator:
    """Best-fit allocation with coalescing over one registered region of `capacity` bytes."""

    def __init__(self, machine: Machine, zone: int, capacity: int):
        if capacity <= 0:
            raise AllocationError(f"general allocator capacity must be positive, got {capacity}")
        self.capacity = align_up(capacity)
        self.region = machine.register_memory(zone, self.capacity)
        self._free: list[list[int]] = [[0, self.capacity]]
        self._used: dict[int, int] = {}
        self._lock = threading.Lock()

    @property
    def free_blocks(self) -> list[tuple[int, int]]:
        return [tuple(b) for b in self._free]

    def alloc(self, length: int) -> RegisteredMemory:
        if length <= 0:
            raise AllocationError(f"cannot allocate {length} bytes")
        need = align_up(length)
        if need > self.capacity:
            raise AllocationError(f"{length} bytes exceeds the allocator capacity {self.capacity}")
        with self._lock:
            best = None
            for i, (offset, size) in enumerate(self._free):
                if size >= need and (best is None or size < self._free[best][1]):
                    best = i
            if best is None:
                raise AllocationError(f"out of memory: no free block of {need} bytes")
            offset, size = self._free[best]
            if size == need:
                del self._free[best]
            else:
                self._free[best] = [offset + need, size - need]
            self._used[offset] = need
        return RegisteredMemory(self.region, offset, length)

    def free(self, mem: RegisteredMemory) -> None:
        if mem.region is not self.region:
            raise AllocationError(f"{mem!r} does not belong to this allocator")
        with self._lock:
            size = self._used.pop(mem.offset, None)
            if size is None:
                raise AllocationError(f"double free at offset {mem.offset}")
            i = bisect.bisect_left(self._free, [mem.offset, 0])
            self._free.insert(i, [mem.offset, size])
            if i + 1 < len(self._free) and self._free[i][0] + self._free[i][1] == self._free[i + 1][0]:
                self._free[i][1] += self._free[i + 1][1]
                del self._free[i + 1]
            if i > 0 and self._free[i - 1][0] + self._free[i - 1][1] == self._free[i][0]:
                self._free[i - 1][1] += self._free[i][1]
                del self._free[i]
