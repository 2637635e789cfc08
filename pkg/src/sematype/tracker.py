"""Runtime SemaType deduction, i.e. what the instrumented program computes.

Each thread accumulates call-site weights into its nID and counts recurrence
depth.  While an SCC activation is live it also keeps a stack of frame
addresses pushed on every call into an SCC function.  At an allocation the
stack is folded into a 14-bit rID.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

from .callgraph import CallSiteEdge, EdgeKind
from .encoding import DEFAULT_LAYOUT, Layout, SemaTypeTag
from .weights import WeightedDag

FRAME_SIZES = (64, 128, 192, 256)


class TrackerError(RuntimeError):
    pass


def aggregate_rid(stack: Sequence[int], mask: int = 0x3FFF) -> int:
    h = 0
    for p in stack:  # oldest first, so the mask keeps the newest frames
        h = (h << 2) + ((p >> 6) & 0x3)
    return h & mask


@dataclass(frozen=True)
class SyntheticFrameModel:
    base_address: int = 0x7FFD_0000_0000
    frame_sizes: tuple[int, ...] = FRAME_SIZES

    def frame_size(self, fn: str) -> int:
        return self.frame_sizes[zlib.crc32(fn.encode()) % len(self.frame_sizes)]

    def address(self, stack: Sequence[str]) -> int:
        """Stack pointer with ``stack`` (outermost first) live."""
        return self.base_address - sum(self.frame_size(f) for f in stack)


def synthesize_frame(model: SyntheticFrameModel, stack: Sequence[str]) -> int:
    return model.address(stack)


@dataclass(frozen=True)
class SiteInfo:
    edge: CallSiteEdge
    weight: int
    enters: bool
    leaves: bool
    inner: bool


class InstrumentationPlan:
    """Per-call-site actions derived from a weighted DAG.

    Sites of the source graph that trimming removed are accepted as plain
    zero-weight calls; nothing below them can allocate.
    """

    def __init__(self, wd: WeightedDag, layout: Layout = DEFAULT_LAYOUT,
                 frames: SyntheticFrameModel | None = None):
        self.wd = wd
        self.layout = layout
        self.frames = frames or SyntheticFrameModel()
        d = wd.base
        graph = wd.source or wd.graph
        self.entry = graph.entry
        self.graph = graph
        self.sites: dict[str, SiteInfo] = {}
        for sid, e in graph.edges.items():
            if sid in d.kind:
                kind = d.kind[sid]
                self.sites[sid] = SiteInfo(e, wd.site_weight.get(sid, 0),
                                           d.enters_scc(sid), d.leaves_scc(sid),
                                           kind is EdgeKind.INNER)
            else:
                self.sites[sid] = SiteInfo(e, 0, False, False, False)
        self.entry_recursive = d.sccs[d.scc_of[self.entry]].recursive

    def is_allocator(self, fn: str) -> bool:
        return self.graph.is_allocator(fn)

    def allocator_sites(self, fn: str) -> list[str]:
        return [e.site_id for e in self.graph.out_edges(fn) if self.graph.is_allocator(e.callee)]


@dataclass
class _Record:
    site: str
    saved: tuple | None  # (scc_stack, h) to restore, or None


@dataclass
class ThreadTracker:
    plan: InstrumentationPlan
    thread_id: int = 0
    nid_acc: int = 0
    depth_l: int = 0
    scc_stack: list[int] = field(default_factory=list)
    h: int | None = None
    call_stack: list[_Record] = field(default_factory=list)
    functions: list[str] = field(default_factory=list)
    nid_wraps: int = 0

    def __post_init__(self):
        if not self.functions:
            self.functions = [self.plan.entry]
            if self.plan.entry_recursive:
                # the thread starts inside a recursive SCC
                self.depth_l = 1

    @property
    def current(self) -> str:
        return self.functions[-1]

    @property
    def sp(self) -> int:
        return self.plan.frames.address(self.functions)

    def state(self) -> tuple:
        return (self.nid_acc, self.depth_l, tuple(self.scc_stack), self.h,
                tuple(self.functions), len(self.call_stack))

    def on_call(self, site: str) -> None:
        info = self.plan.sites.get(site)
        if info is None:
            raise TrackerError(f"unknown call site {site!r}")
        if info.edge.caller != self.current:
            raise TrackerError(
                f"site {site!r} is a call from {info.edge.caller!r}, "
                f"but thread {self.thread_id} is in {self.current!r}")
        saved = None
        self.nid_acc += info.weight
        if info.edge.in_loop or info.enters:
            self.depth_l += 1
        if info.enters:
            # fresh activation; the caller's stack pointer is its first frame
            saved = (self.scc_stack, self.h)
            self.scc_stack = [self.sp]
            self.h = None
        elif info.inner:
            self.scc_stack.append(self.sp)
        elif info.leaves:
            saved = (self.scc_stack, self.h)
            self.h = aggregate_rid(self.scc_stack, self.plan.layout.rid_mask)
            self.scc_stack = []
        self.call_stack.append(_Record(site, saved))
        self.functions.append(info.edge.callee)

    def on_return(self) -> None:
        if not self.call_stack:
            raise TrackerError(f"return with empty call stack on thread {self.thread_id}")
        rec = self.call_stack.pop()
        info = self.plan.sites[rec.site]
        self.functions.pop()
        if rec.saved is not None:
            self.scc_stack, self.h = rec.saved
        elif info.inner:
            self.scc_stack.pop()
        if info.edge.in_loop or info.enters:
            self.depth_l -= 1
        self.nid_acc -= info.weight

    def on_alloc(self) -> SemaTypeTag:
        layout = self.plan.layout
        if self.nid_acc > layout.nid_mask:
            self.nid_wraps += 1
        if self.scc_stack:
            rid = aggregate_rid(self.scc_stack, layout.rid_mask)
        else:
            rid = self.h or 0
        return SemaTypeTag(self.depth_l != 0, self.nid_acc & layout.nid_mask, rid, self.thread_id)
