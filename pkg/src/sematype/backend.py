"""Simulated SemaType-segregating BIBOP heap.

No memory is touched.  The model tracks address ranges and block headers,
enough to replay traces and ask which objects could ever share an address.

Each thread owns a global pool for one-time allocations and a lazy pool for
the first sighting of a recurrent SemaType.  From the second sighting on,
each recurrent (nid, rid, size class) gets its own individual pool, and only
those reuse addresses.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field

from .encoding import DEFAULT_LAYOUT, Layout, SemaTypeTag, decode

HEADER = 16
MIN_CLASS = 16
PAGE = 4096
SUBPOOL_BYTES = 64 * 1024
INDIVIDUAL_SLOTS = 4


class OutOfMemory(MemoryError):
    pass


class InvalidFree(ValueError):
    pass


class PoolKind(str, enum.Enum):
    GLOBAL = "global"
    LAZY = "lazy"
    INDIVIDUAL = "individual"


def size_class(nbytes: int) -> int:
    """Smallest power of two >= nbytes, floored at 16."""
    if nbytes <= MIN_CLASS:
        return MIN_CLASS
    return 1 << (nbytes - 1).bit_length()


def _round_up(x: int, to: int) -> int:
    return (x + to - 1) // to * to


class AddressSpace:
    """Hands out disjoint page-aligned ranges below a ceiling."""

    def __init__(self, base: int = 0x1000_0000_0000, ceiling: int = 1 << 47):
        self.cursor = base
        self.ceiling = ceiling
        self.reserved = 0

    def reserve(self, nbytes: int) -> int:
        nbytes = _round_up(nbytes, PAGE)
        if self.cursor + nbytes > self.ceiling:
            raise OutOfMemory(f"cannot reserve {nbytes} bytes below {self.ceiling:#x}")
        start = self.cursor
        self.cursor += nbytes
        self.reserved += nbytes
        return start

    def release(self, nbytes: int) -> None:
        # the range itself is never handed out again
        self.reserved -= _round_up(nbytes, PAGE)


@dataclass
class SubPool:
    slot_size: int
    regions: list[tuple[int, int]] = field(default_factory=list)
    cursor: int = 0
    end: int = 0
    free_list: list[int] = field(default_factory=list)


@dataclass
class Pool:
    id: int
    kind: PoolKind
    owner_thread: int
    sematype_key: tuple[int, int] | None = None
    classes: dict[int, SubPool] = field(default_factory=dict)
    allocs: int = 0

    @property
    def ranges(self) -> list[tuple[int, int]]:
        return [r for sp in self.classes.values() for r in sp.regions]


@dataclass(frozen=True)
class BlockHeader:
    kind: str  # "huge" | "regular"
    thread_id: int
    pool_id: int | None
    align_offset: int
    size: int


@dataclass
class Block:
    address: int
    slot: int
    slot_size: int
    class_bytes: int
    size: int
    header: BlockHeader
    tag: SemaTypeTag
    pool: Pool | None
    pending_free: bool = False

    @property
    def interval(self) -> tuple[int, int]:
        return (self.slot, self.slot + self.slot_size)


@dataclass
class ThreadHeap:
    tid: int
    global_pool: Pool
    lazy_pool: Pool
    individual: dict[tuple[int, int, int], Pool] = field(default_factory=dict)
    seen: set[tuple[int, int, int]] = field(default_factory=set)
    deferred: list[int] = field(default_factory=list)


class SimHeap:
    def __init__(self, layout: Layout = DEFAULT_LAYOUT, ceiling: int = 1 << 47,
                 subpool_bytes: int = SUBPOOL_BYTES):
        self.layout = layout
        self.space = AddressSpace(ceiling=ceiling)
        self.subpool_bytes = subpool_bytes
        self.threads: dict[int, ThreadHeap] = {}
        self.live: dict[int, Block] = {}
        self.huge: dict[int, Block] = {}
        self._pool_ids = 0
        self.events: list[str] = []
        # counters
        self.allocs = 0
        self.frees = 0
        self.reuses = 0
        self.huge_allocs = 0
        self.deferred_frees = 0
        self.recurrent_allocs = 0
        self.class_bytes_allocated = 0
        self.leak_bytes = 0
        self.resident = 0
        self.peak_virtual = 0
        self.peak_resident = 0
        self.sematypes: set[tuple[int, bool, int, int]] = set()
        self.allocs_by_type: dict[tuple[int, int, int, int], int] = defaultdict(int)

    # -- plumbing ---------------------------------------------------------

    def _new_pool(self, kind: PoolKind, tid: int, key=None) -> Pool:
        self._pool_ids += 1
        return Pool(self._pool_ids, kind, tid, key)

    def thread(self, tid: int) -> ThreadHeap:
        th = self.threads.get(tid)
        if th is None:
            th = ThreadHeap(tid, self._new_pool(PoolKind.GLOBAL, tid),
                            self._new_pool(PoolKind.LAZY, tid))
            self.threads[tid] = th
        return th

    def _track_peaks(self) -> None:
        self.peak_virtual = max(self.peak_virtual, self.space.reserved)
        self.peak_resident = max(self.peak_resident, self.resident)

    def _carve(self, pool: Pool, cls: int) -> int:
        """Slot start for a new block of class ``cls`` in ``pool``."""
        sp = pool.classes.get(cls)
        slot_size = cls + HEADER
        if sp is None:
            sp = pool.classes[cls] = SubPool(slot_size)
        if sp.free_list:
            self.reuses += 1
            return sp.free_list.pop()
        if sp.cursor + slot_size > sp.end:
            if pool.kind is PoolKind.INDIVIDUAL:
                # grow by doubling, each time in a fresh range
                nslots = INDIVIDUAL_SLOTS << len(sp.regions)
                nbytes = nslots * slot_size
            else:
                nbytes = max(self.subpool_bytes, slot_size)
            start = self.space.reserve(nbytes)
            if sp.regions:
                self.events.append(f"pool {pool.id} class {cls} grew by {nbytes} bytes")
            sp.regions.append((start, start + _round_up(nbytes, PAGE)))
            sp.cursor, sp.end = start, start + _round_up(nbytes, PAGE)
        slot = sp.cursor
        sp.cursor += slot_size
        self.resident += slot_size
        return slot

    def _drain(self, tid: int) -> None:
        th = self.thread(tid)
        while th.deferred:
            self._release(self.live[th.deferred.pop(0)])

    # -- API --------------------------------------------------------------

    def malloc(self, tid: int, word: int, align: int | None = None) -> int:
        self._drain(tid)
        th = self.thread(tid)
        kind, tag, size = decode(word, self.layout)
        tag = SemaTypeTag(tag.loop, tag.nid, tag.rid, tid)
        self.allocs += 1
        if kind == "huge":
            nbytes = size + HEADER
            start = self.space.reserve(nbytes)
            addr = start + HEADER
            hdr = BlockHeader("huge", tid, None, 0, size)
            blk = Block(addr, start, _round_up(nbytes, PAGE), size, size, hdr, tag, None)
            self.huge[addr] = blk
            self.live[addr] = blk
            self.huge_allocs += 1
            self.resident += blk.slot_size
            self._track_peaks()
            return addr
        if size == 0:
            size = 1
        if align and align > HEADER:
            if align & (align - 1):
                raise ValueError(f"alignment {align} is not a power of two")
            cls = size_class(size + align)
        else:
            align = None
            cls = size_class(size)
        key = (tag.nid, tag.rid, cls)
        if not tag.loop:
            pool = th.global_pool
        elif key in th.individual:
            pool = th.individual[key]
        elif key in th.seen:
            pool = th.individual[key] = self._new_pool(PoolKind.INDIVIDUAL, tid, (tag.nid, tag.rid))
        else:
            th.seen.add(key)
            pool = th.lazy_pool
        slot = self._carve(pool, cls)
        addr = slot + HEADER
        offset = 0
        if align:
            addr = _round_up(addr, align)
            offset = addr - (slot + HEADER)
        hdr = BlockHeader("regular", tid, pool.id, offset, size)
        blk = Block(addr, slot, cls + HEADER, cls, size, hdr, tag, pool)
        self.live[addr] = blk
        pool.allocs += 1
        self.class_bytes_allocated += cls
        if tag.loop:
            self.recurrent_allocs += 1
        self.sematypes.add((tid, tag.loop, tag.nid, tag.rid))
        if tag.loop:
            self.allocs_by_type[(tid, tag.nid, tag.rid, cls)] += 1
        self._track_peaks()
        return addr

    def header(self, addr: int) -> BlockHeader:
        return self.live[addr].header

    def free(self, tid: int, addr: int) -> None:
        blk = self.live.get(addr)
        if blk is None or blk.pending_free:
            raise InvalidFree(f"free of non-live address {addr:#x} (double or invalid free)")
        self.frees += 1
        owner = blk.header.thread_id
        if blk.header.kind == "huge":
            self._release(blk)
            return
        if owner != tid:
            blk.pending_free = True
            self.deferred_frees += 1
            self.thread(owner).deferred.append(addr)
            self._drain(tid)
            return
        self._drain(tid)
        self._release(blk)

    def _release(self, blk: Block) -> None:
        del self.live[blk.address]
        if blk.header.kind == "huge":
            del self.huge[blk.address]
            self.space.release(blk.slot_size)
            self.resident -= blk.slot_size
            return
        pool = blk.pool
        if pool.kind is PoolKind.INDIVIDUAL:
            pool.classes[blk.class_bytes].free_list.append(blk.slot)
        else:
            # pages go back to the OS; the range is retired for good
            self.resident -= blk.slot_size
            self.leak_bytes += blk.class_bytes

    def pending_deferred(self) -> int:
        return sum(len(t.deferred) for t in self.threads.values())

    def pools(self):
        for th in self.threads.values():
            yield th.global_pool
            yield th.lazy_pool
            yield from th.individual.values()

    def stats(self) -> dict:
        n_pools = sum(len(t.individual) for t in self.threads.values())
        pooled = {(t.tid,) + k for t in self.threads.values() for k in t.individual}
        pooled_allocs = sum(n for (tid, nid, rid, cls), n in self.allocs_by_type.items()
                            if (tid, nid, rid, cls) in pooled)
        regular = self.allocs - self.huge_allocs
        return {
            "allocs": self.allocs,
            "frees": self.frees,
            "reuses": self.reuses,
            "huge_allocs": self.huge_allocs,
            "recurrent_allocs": self.recurrent_allocs,
            "recurrent_pools": n_pools,
            "recurrent_pct": round(100.0 * self.recurrent_allocs / self.allocs, 6) if self.allocs else 0.0,
            "avg_allocs_per_recurrent_pool": round(pooled_allocs / n_pools, 6) if n_pools else 0.0,
            "leak_bytes": self.leak_bytes,
            "leak_pct": round(100.0 * self.leak_bytes / self.class_bytes_allocated, 6)
            if self.class_bytes_allocated else 0.0,
            "peak_virtual": self.peak_virtual,
            "peak_resident": self.peak_resident,
            "distinct_sematypes": len(self.sematypes),
            "regular_allocs": regular,
            "deferred_frees": self.deferred_frees,
            "pending_deferred": self.pending_deferred(),
        }
