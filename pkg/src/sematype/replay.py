"""Trace replay through the tracker and the simulated heap.

Trace file format, one event per line::

    T<tid> call <site_id>
    T<tid> ret
    T<tid> alloc <obj> <size>
    T<tid> free <obj>
    spawn <tid>
    # comment

Thread 0 exists from the start; other threads must be spawned first.  Every
thread starts in the graph's entry function.  An ``alloc`` issued from a
non-allocator function performs the call/return of that function's (single)
allocator call site implicitly.
"""

from __future__ import annotations

import bisect
import random
from collections import defaultdict
from dataclasses import dataclass, field

from .backend import InvalidFree, OutOfMemory, SimHeap, size_class
from .callgraph import FlowCallGraph
from .encoding import DEFAULT_LAYOUT, Layout, SemaTypeTag, encode
from .tracker import InstrumentationPlan, SyntheticFrameModel, ThreadTracker, TrackerError
from .weights import WeightedDag


class TraceError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ReplayError(RuntimeError):
    def __init__(self, message: str, index: int):
        self.index = index
        super().__init__(f"event {index}: {message}")


@dataclass(frozen=True)
class TraceEvent:
    tid: int
    kind: str  # call | ret | alloc | free | spawn
    site: str | None = None
    obj: str | None = None
    size: int | None = None
    line: int = 0

    def __str__(self) -> str:
        if self.kind == "spawn":
            return f"spawn {self.tid}"
        head = f"T{self.tid} {self.kind}"
        if self.kind == "call":
            return f"{head} {self.site}"
        if self.kind == "alloc":
            return f"{head} {self.obj} {self.size}"
        if self.kind == "free":
            return f"{head} {self.obj}"
        return head


def format_trace(events: list[TraceEvent]) -> str:
    return "".join(f"{e}\n" for e in events)


def _parse_tid(tok: str, lineno: int) -> int:
    try:
        tid = int(tok[1:] if tok[:1] == "T" else tok)
    except ValueError:
        raise TraceError(f"bad thread id {tok!r}", lineno) from None
    if tid < 0:
        raise TraceError(f"bad thread id {tok!r}", lineno)
    return tid


def parse_trace(text: str, graph: FlowCallGraph | None = None) -> list[TraceEvent]:
    """Parse and validate a trace.

    Without a graph only structure is checked: call nesting and object
    lifetimes.  With one, call sites must exist and be legal from the calling
    thread's current function.
    """
    events = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "spawn":
            if len(tok) != 2:
                raise TraceError("expected `spawn <tid>`", lineno)
            events.append(TraceEvent(_parse_tid(tok[1], lineno), "spawn", line=lineno))
            continue
        if not tok[0].startswith("T") or len(tok) < 2:
            raise TraceError(f"malformed event {line!r}", lineno)
        tid = _parse_tid(tok[0], lineno)
        kind, args = tok[1], tok[2:]
        if kind == "call" and len(args) == 1:
            events.append(TraceEvent(tid, "call", site=args[0], line=lineno))
        elif kind == "ret" and not args:
            events.append(TraceEvent(tid, "ret", line=lineno))
        elif kind == "alloc" and len(args) == 2:
            try:
                size = int(args[1], 0)
            except ValueError:
                raise TraceError(f"bad size {args[1]!r}", lineno) from None
            if size <= 0:
                raise TraceError(f"size must be positive, got {size}", lineno)
            events.append(TraceEvent(tid, "alloc", obj=args[0], size=size, line=lineno))
        elif kind == "free" and len(args) == 1:
            events.append(TraceEvent(tid, "free", obj=args[0], line=lineno))
        else:
            raise TraceError(f"malformed event {line!r}", lineno)
    validate_trace(events, graph)
    return events


def validate_trace(events: list[TraceEvent], graph: FlowCallGraph | None = None) -> None:
    threads: dict[int, list[str]] = {0: [graph.entry if graph else ""]}
    live: set[str] = set()
    seen: set[str] = set()
    for i, ev in enumerate(events):
        where = ev.line or None
        if ev.kind == "spawn":
            if ev.tid in threads:
                raise TraceError(f"thread {ev.tid} already exists", where)
            threads[ev.tid] = [graph.entry if graph else ""]
            continue
        stack = threads.get(ev.tid)
        if stack is None:
            raise TraceError(f"thread {ev.tid} used before spawn", where)
        if ev.kind == "call":
            if graph is not None:
                e = graph.edges.get(ev.site)
                if e is None:
                    raise TraceError(f"unknown site_id {ev.site!r}", where)
                if e.caller != stack[-1]:
                    raise TraceError(f"site {ev.site!r} is not a call from {stack[-1]!r}", where)
                stack.append(e.callee)
            else:
                stack.append(ev.site)
        elif ev.kind == "ret":
            if len(stack) == 1:
                raise TraceError(f"unbalanced ret on thread {ev.tid}", where)
            stack.pop()
        elif ev.kind == "alloc":
            if ev.obj in seen:
                raise TraceError(f"object {ev.obj!r} allocated twice", where)
            if graph is not None and not graph.is_allocator(stack[-1]):
                n = sum(graph.is_allocator(e.callee) for e in graph.out_edges(stack[-1]))
                if n != 1:
                    raise TraceError(
                        f"{stack[-1]!r} has {n} allocator call sites; "
                        "an implicit alloc needs exactly one (use call/ret)", where)
            seen.add(ev.obj)
            live.add(ev.obj)
        elif ev.kind == "free":
            if ev.obj not in live:
                what = "freed twice" if ev.obj in seen else "unknown"
                raise TraceError(f"free of {what} object {ev.obj!r}", where)
            live.discard(ev.obj)


# --- segregation monitor ----------------------------------------------------

@dataclass
class ObjectRecord:
    obj: str
    tid: int
    tag: SemaTypeTag
    size: int
    class_bytes: int
    address: int
    interval: tuple[int, int]
    site: str | None
    pool_kind: str
    alloc_index: int
    free_index: int | None = None

    @property
    def reuse_key(self) -> tuple:
        return (self.tid, self.tag.nid, self.tag.rid, self.class_bytes)


class SegregationMonitor:
    """Checks every new block against every interval ever handed out.

    Two regular recurrent objects may share address space when their
    (thread, nid, rid, size class) keys match and the older one was freed
    before the newer one was allocated.  Nothing else may overlap.
    """

    def __init__(self):
        self._starts: list[int] = []
        self._recs: list[ObjectRecord] = []
        self._max_len = 0
        self._huge: list[ObjectRecord] = []
        self.violations: list[str] = []
        self.reissued_one_time = 0
        self.overlaps = 0

    def _candidates(self, lo: int, hi: int):
        i = bisect.bisect_left(self._starts, hi)
        j = i - 1
        while j >= 0 and self._starts[j] > lo - self._max_len:
            r = self._recs[j]
            if r.interval[1] > lo:
                yield r
            j -= 1
        for r in self._huge:
            if r.interval[0] < hi and r.interval[1] > lo:
                yield r

    def admit(self, new: ObjectRecord) -> None:
        lo, hi = new.interval
        for old in self._candidates(lo, hi):
            self.overlaps += 1
            ok = (old.pool_kind != "huge" and new.pool_kind != "huge"
                  and old.tag.loop and new.tag.loop
                  and old.reuse_key == new.reuse_key
                  and old.free_index is not None and old.free_index < new.alloc_index)
            if not old.tag.loop:
                self.reissued_one_time += 1
            if not ok:
                self.violations.append(
                    f"{new.obj!r} (tid={new.tid} tag={_tag_str(new.tag)} class={new.class_bytes}) "
                    f"overlaps {old.obj!r} (tid={old.tid} tag={_tag_str(old.tag)} "
                    f"class={old.class_bytes} freed_at={old.free_index})")
        if new.pool_kind == "huge":
            self._huge.append(new)
            return
        i = bisect.bisect_right(self._starts, lo)
        self._starts.insert(i, lo)
        self._recs.insert(i, new)
        self._max_len = max(self._max_len, hi - lo)

    @property
    def verdict(self) -> str:
        return "pass" if not self.violations else "fail"


def _tag_str(t: SemaTypeTag) -> str:
    return f"L{int(t.loop)}/n{t.nid}/r{t.rid}"


# --- replay -----------------------------------------------------------------

@dataclass
class ReplayReport:
    stats: dict
    census: dict
    verdict: str
    violations: list[str]
    diagnostics: list[str]
    objects: dict[str, ObjectRecord] = field(default_factory=dict)
    alloc_tags: list[tuple[str, tuple[str, ...], SemaTypeTag]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "stats": self.stats,
            "census": self.census,
            "violations": list(self.violations),
            "diagnostics": list(self.diagnostics),
        }


def replay(wd: WeightedDag, events: list[TraceEvent], layout: Layout = DEFAULT_LAYOUT,
           frames: SyntheticFrameModel | None = None, heap: SimHeap | None = None) -> ReplayReport:
    plan = InstrumentationPlan(wd, layout, frames)
    heap = heap or SimHeap(layout)
    trackers: dict[int, ThreadTracker] = {0: ThreadTracker(plan, 0)}
    monitor = SegregationMonitor()
    objects: dict[str, ObjectRecord] = {}
    alloc_tags = []
    diagnostics: list[str] = []
    site_types: dict[str, set] = defaultdict(set)

    for i, ev in enumerate(events):
        try:
            if ev.kind == "spawn":
                if ev.tid in trackers:
                    raise ReplayError(f"thread {ev.tid} already exists", i)
                trackers[ev.tid] = ThreadTracker(plan, ev.tid)
                continue
            t = trackers.get(ev.tid)
            if t is None:
                raise ReplayError(f"thread {ev.tid} used before spawn", i)
            if ev.kind == "call":
                t.on_call(ev.site)
            elif ev.kind == "ret":
                t.on_return()
            elif ev.kind == "alloc":
                if ev.obj in objects:
                    raise ReplayError(f"object {ev.obj!r} allocated twice", i)
                implicit = not plan.is_allocator(t.current)
                if implicit:
                    sites = plan.allocator_sites(t.current)
                    if len(sites) != 1:
                        raise ReplayError(
                            f"implicit alloc from {t.current!r} needs exactly one allocator site", i)
                    t.on_call(sites[0])
                site = t.call_stack[-1].site if t.call_stack else None
                tag = t.on_alloc()
                stack_sites = tuple(r.site for r in t.call_stack)
                if implicit:
                    t.on_return()
                addr = heap.malloc(ev.tid, encode(tag, ev.size, layout))
                blk = heap.live[addr]
                kind = "huge" if blk.header.kind == "huge" else blk.pool.kind.value
                rec = ObjectRecord(ev.obj, ev.tid, tag, ev.size, blk.class_bytes, addr,
                                   blk.interval, site, kind, i)
                monitor.admit(rec)
                objects[ev.obj] = rec
                alloc_tags.append((ev.obj, stack_sites, tag))
                site_types[site or "?"].add((ev.tid, tag.loop, tag.nid, tag.rid))
            elif ev.kind == "free":
                rec = objects.get(ev.obj)
                if rec is None or rec.free_index is not None:
                    raise ReplayError(f"free of unknown or freed object {ev.obj!r}", i)
                heap.free(ev.tid, rec.address)
                rec.free_index = i
            else:
                raise ReplayError(f"unknown event kind {ev.kind!r}", i)
        except (TrackerError, InvalidFree, OutOfMemory, ValueError) as exc:
            raise ReplayError(str(exc), i) from exc

    wraps = sum(t.nid_wraps for t in trackers.values())
    if wraps:
        diagnostics.append(f"nid accumulator exceeded {layout.nid_bits} bits {wraps} times (wrapped)")
    diagnostics.extend(heap.events)
    if heap.pending_deferred():
        diagnostics.append(f"{heap.pending_deferred()} cross-thread frees still deferred at end of trace")
    census = {
        "alloc_sites": len(site_types),
        "sematypes": len({ty for tys in site_types.values() for ty in tys}),
        "per_site": {s: len(site_types[s]) for s in sorted(site_types)},
    }
    stats = heap.stats()
    stats["one_time_reissued"] = monitor.reissued_one_time
    return ReplayReport(stats, census, monitor.verdict, monitor.violations, diagnostics,
                        objects, alloc_tags)


# --- UAF probes -------------------------------------------------------------

@dataclass(frozen=True)
class UafProbe:
    dangling_object: str
    attacker_objects: tuple[str, ...]


def check_uaf(wd: WeightedDag, events: list[TraceEvent], probe: UafProbe,
              layout: Layout = DEFAULT_LAYOUT) -> dict:
    rep = replay(wd, events, layout)
    victim = rep.objects.get(probe.dangling_object)
    if victim is None:
        raise TraceError(f"unknown dangling object {probe.dangling_object!r}")
    if victim.free_index is None:
        raise TraceError(f"dangling object {probe.dangling_object!r} is never freed")
    verdicts = {}
    for name in probe.attacker_objects:
        atk = rep.objects.get(name)
        if atk is None:
            raise TraceError(f"unknown attacker object {name!r}")
        if atk.alloc_index < victim.free_index:
            raise TraceError(f"attacker {name!r} is allocated before {probe.dangling_object!r} is freed")
        lo, hi = victim.address, victim.address + victim.class_bytes
        overlap = atk.address < hi and lo < atk.address + atk.class_bytes
        verdicts[name] = {
            "verdict": "overlap" if overlap else "blocked",
            "tag": _tag_dict(atk),
            "address": atk.address,
        }
    return {
        "dangling": {"object": victim.obj, "tag": _tag_dict(victim), "address": victim.address},
        "attackers": verdicts,
    }


def _tag_dict(r: ObjectRecord) -> dict:
    return {"thread": r.tid, "loop": r.tag.loop, "nid": r.tag.nid, "rid": r.tag.rid,
            "size_class": r.class_bytes}


# --- trace generation -------------------------------------------------------

SIZES = (8, 16, 24, 32, 48, 64, 100, 128, 200, 256, 512)


@dataclass
class _Activation:
    fn: str
    used: dict[str, int] = field(default_factory=dict)
    inner: int = 0  # intra-SCC calls on the stack up to here


def gen_trace(wd: WeightedDag, seed: int, n_events: int, recursion_bound: int = 3,
              loop_bound: int = 3, free_prob: float = 0.9, n_threads: int = 1,
              sizes: tuple[int, ...] = SIZES) -> list[TraceEvent]:
    """Pseudo-random walk over the trimmed graph.

    Per activation a call site runs once, or up to ``loop_bound`` times if it
    is in a loop; at most ``recursion_bound`` intra-SCC calls are live.  Each
    allocation is freed with probability ``free_prob`` (at a random later
    point or at the end).
    """
    if n_events < 1 or loop_bound < 1 or recursion_bound < 0 or n_threads < 1:
        raise ValueError("need n_events >= 1, loop_bound >= 1, recursion_bound >= 0, n_threads >= 1")
    rng = random.Random(seed)
    g = wd.graph
    inner_sites = {e.site_id for e in wd.base.inner_edges}
    # one size per allocation site keeps same-SemaType requests in one class most of the time
    site_size = {s: rng.choice(sizes) for s in sorted(g.edges)}
    out: list[TraceEvent] = [TraceEvent(t, "spawn") for t in range(1, n_threads)]
    stacks = {t: [_Activation(g.entry)] for t in range(n_threads)}
    live: list[str] = []
    doomed: set[str] = set()
    counter = 0

    def limit(e):
        return loop_bound if e.in_loop else 1

    steps = 0
    while steps < n_events:
        active = [t for t in range(n_threads) if stacks[t] is not None]
        if not active:
            break
        tid = rng.choice(active)
        stack = stacks[tid]
        top = stack[-1]
        calls, allocs = [], []
        for e in g.out_edges(top.fn):
            if top.used.get(e.site_id, 0) >= limit(e):
                continue
            if g.is_allocator(e.callee):
                allocs.append(e)
            elif e.site_id not in inner_sites or top.inner < recursion_bound:
                calls.append(e)
        frees = [o for o in live if o in doomed]
        choices = []
        if calls:
            choices.append(("call", 4))
        if allocs:
            choices.append(("alloc", 4))
        if frees:
            choices.append(("free", 3))
        if len(stack) > 1:
            choices.append(("ret", 2))
        if not choices:
            stacks[tid] = None
            continue
        action = rng.choices([c for c, _ in choices], [w for _, w in choices])[0]
        steps += 1
        if action == "call":
            e = rng.choice(calls)
            top.used[e.site_id] = top.used.get(e.site_id, 0) + 1
            stack.append(_Activation(e.callee, inner=top.inner + (e.site_id in inner_sites)))
            out.append(TraceEvent(tid, "call", site=e.site_id))
        elif action == "ret":
            stack.pop()
            out.append(TraceEvent(tid, "ret"))
        elif action == "alloc":
            e = rng.choice(allocs)
            top.used[e.site_id] = top.used.get(e.site_id, 0) + 1
            obj = f"o{counter}"
            counter += 1
            size = site_size[e.site_id]
            if rng.random() < 0.1:
                size = rng.choice(sizes)
            out += [TraceEvent(tid, "call", site=e.site_id),
                    TraceEvent(tid, "alloc", obj=obj, size=size),
                    TraceEvent(tid, "ret")]
            live.append(obj)
            if rng.random() < free_prob:
                doomed.add(obj)
        else:
            obj = rng.choice(frees)
            live.remove(obj)
            out.append(TraceEvent(tid, "free", obj=obj))

    for t in range(n_threads):
        depth = len(stacks[t]) - 1 if stacks[t] is not None else 0
        out += [TraceEvent(t, "ret")] * depth
    for obj in live:
        if obj in doomed:
            out.append(TraceEvent(rng.randrange(n_threads), "free", obj=obj))
    return out
