"""Flow-sensitive call graphs and their reduction to a condensed DAG.

Graph file format, one statement per line::

    node <id> [alloc]
    edge <site_id> <caller> <callee> [loop] [indirect] order=<n>
    entry <id>
    # comment
"""

from __future__ import annotations

import dataclasses
import enum
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable


class GraphError(ValueError):
    """Invalid graph input or a graph that cannot feed the pipeline."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class FunctionNode:
    id: str
    is_allocator: bool = False


@dataclass(frozen=True)
class CallSiteEdge:
    site_id: str
    caller: str
    callee: str
    order: int
    in_loop: bool = False
    from_indirect: bool = False


@dataclass
class FlowCallGraph:
    nodes: dict[str, FunctionNode]
    edges: dict[str, CallSiteEdge]
    entry: str
    # filled in by mark_recurrent
    recurrent_edges: frozenset[str] = frozenset()
    prunable_edges: frozenset[str] = frozenset()
    prunable_nodes: frozenset[str] = frozenset()

    def __post_init__(self):
        self._out: dict[str, list[CallSiteEdge]] = defaultdict(list)
        self._in: dict[str, list[CallSiteEdge]] = defaultdict(list)
        for e in self.edges.values():
            self._out[e.caller].append(e)
            self._in[e.callee].append(e)
        for lst in self._out.values():
            lst.sort(key=lambda e: (e.order, e.site_id))
        for lst in self._in.values():
            lst.sort(key=lambda e: (e.caller, e.order, e.site_id))

    def out_edges(self, fn: str) -> list[CallSiteEdge]:
        return self._out.get(fn, [])

    def in_edges(self, fn: str) -> list[CallSiteEdge]:
        return self._in.get(fn, [])

    @property
    def allocators(self) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if n.is_allocator)

    def is_allocator(self, fn: str) -> bool:
        node = self.nodes.get(fn)
        return node is not None and node.is_allocator

    def with_edges(self, nodes: Iterable[str], edges: Iterable[str]) -> "FlowCallGraph":
        """Sub-graph restricted to the given node and edge ids."""
        keep = set(nodes)
        return FlowCallGraph(
            nodes={k: v for k, v in self.nodes.items() if k in keep},
            edges={k: self.edges[k] for k in sorted(edges)},
            entry=self.entry,
        )

    def validate(self) -> None:
        if self.entry not in self.nodes:
            raise GraphError(f"entry {self.entry!r} is not a declared node")
        if self.nodes[self.entry].is_allocator:
            raise GraphError(f"entry {self.entry!r} must not be an allocator")
        per_caller: dict[str, set[int]] = defaultdict(set)
        for e in self.edges.values():
            for end in (e.caller, e.callee):
                if end not in self.nodes:
                    raise GraphError(f"edge {e.site_id!r} references undeclared node {end!r}")
            if e.order in per_caller[e.caller]:
                raise GraphError(f"duplicate order={e.order} among call sites of {e.caller!r}")
            per_caller[e.caller].add(e.order)


def parse_graph(text: str) -> FlowCallGraph:
    nodes: dict[str, FunctionNode] = {}
    edges: dict[str, CallSiteEdge] = {}
    entry = None
    pending = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kw = tok[0]
        if kw == "node":
            if len(tok) not in (2, 3) or (len(tok) == 3 and tok[2] != "alloc"):
                raise GraphError("expected `node <id> [alloc]`", lineno)
            if tok[1] in nodes:
                raise GraphError(f"duplicate node id {tok[1]!r}", lineno)
            nodes[tok[1]] = FunctionNode(tok[1], len(tok) == 3)
        elif kw == "edge":
            if len(tok) < 5:
                raise GraphError("expected `edge <site_id> <caller> <callee> [loop] [indirect] order=<n>`", lineno)
            site, caller, callee = tok[1:4]
            flags = set()
            order = None
            for t in tok[4:]:
                if t.startswith("order="):
                    try:
                        order = int(t[6:])
                    except ValueError:
                        raise GraphError(f"bad order value {t[6:]!r}", lineno) from None
                elif t in ("loop", "indirect") and t not in flags:
                    flags.add(t)
                else:
                    raise GraphError(f"unexpected token {t!r}", lineno)
            if order is None:
                raise GraphError("edge is missing order=<n>", lineno)
            if site in edges:
                raise GraphError(f"duplicate site id {site!r}", lineno)
            edges[site] = CallSiteEdge(site, caller, callee, order, "loop" in flags, "indirect" in flags)
            pending.append((lineno, edges[site]))
        elif kw == "entry":
            if len(tok) != 2:
                raise GraphError("expected `entry <id>`", lineno)
            if entry is not None:
                raise GraphError("entry declared twice", lineno)
            entry = tok[1]
        else:
            raise GraphError(f"unknown statement {kw!r}", lineno)
    # endpoint checks here so the error can carry the edge's line
    seen_orders: dict[str, set[int]] = defaultdict(set)
    for lineno, e in pending:
        for end in (e.caller, e.callee):
            if end not in nodes:
                raise GraphError(f"edge {e.site_id!r} references undeclared node {end!r}", lineno)
        if e.order in seen_orders[e.caller]:
            raise GraphError(f"duplicate order={e.order} among call sites of {e.caller!r}", lineno)
        seen_orders[e.caller].add(e.order)
    if entry is None:
        raise GraphError("missing `entry <id>` statement")
    g = FlowCallGraph(nodes, edges, entry)
    g.validate()
    return g


def format_graph(g: FlowCallGraph) -> str:
    out = []
    for n in sorted(g.nodes.values(), key=lambda n: n.id):
        out.append(f"node {n.id}" + (" alloc" if n.is_allocator else ""))
    for e in sorted(g.edges.values(), key=lambda e: (e.caller, e.order)):
        flags = (" loop" if e.in_loop else "") + (" indirect" if e.from_indirect else "")
        out.append(f"edge {e.site_id} {e.caller} {e.callee}{flags} order={e.order}")
    out.append(f"entry {g.entry}")
    return "\n".join(out) + "\n"


def _reach(start: Iterable[str], succ) -> set[str]:
    seen = set(start)
    todo = deque(seen)
    while todo:
        n = todo.popleft()
        for m in succ(n):
            if m not in seen:
                seen.add(m)
                todo.append(m)
    return seen


def trim_to_allocators(g: FlowCallGraph) -> FlowCallGraph:
    """Keep only nodes and edges lying on some entry-to-allocator walk.

    Allocators are sinks: their own outgoing edges are dropped.
    """
    live = [e for e in g.edges.values() if not g.is_allocator(e.caller)]
    succ: dict[str, list[str]] = defaultdict(list)
    pred: dict[str, list[str]] = defaultdict(list)
    for e in live:
        succ[e.caller].append(e.callee)
        pred[e.callee].append(e.caller)
    fwd = _reach([g.entry], lambda n: succ[n])
    bwd = _reach(g.allocators, lambda n: pred[n])
    keep = fwd & bwd
    if not any(g.is_allocator(n) for n in keep):
        raise GraphError(f"no allocator is reachable from entry {g.entry!r}")
    kept_edges = [e.site_id for e in live if e.caller in keep and e.callee in keep]
    return g.with_edges(keep, kept_edges)


# --- SCCs -------------------------------------------------------------------

def kosaraju_sharir(nodes: Iterable[str], succ) -> list[list[str]]:
    """Strongly connected components, iteratively (no recursion limit).

    ``succ(n)`` yields successors.  Components come out in topological order
    of the condensation (sources first); members are sorted.
    """
    nodes = sorted(set(nodes))
    adj = {n: sorted(set(succ(n))) for n in nodes}
    radj: dict[str, list[str]] = {n: [] for n in nodes}
    for n in nodes:
        for m in adj[n]:
            radj[m].append(n)

    # pass 1: finishing order on the forward graph
    finished: list[str] = []
    visited: set[str] = set()
    for root in nodes:
        if root in visited:
            continue
        visited.add(root)
        stack = [(root, iter(adj[root]))]
        while stack:
            n, it = stack[-1]
            for m in it:
                if m not in visited:
                    visited.add(m)
                    stack.append((m, iter(adj[m])))
                    break
            else:
                stack.pop()
                finished.append(n)

    # pass 2: reverse finishing order on the transposed graph
    comps: list[list[str]] = []
    assigned: set[str] = set()
    for root in reversed(finished):
        if root in assigned:
            continue
        comp = []
        assigned.add(root)
        todo = [root]
        while todo:
            n = todo.pop()
            comp.append(n)
            for m in radj[n]:
                if m not in assigned:
                    assigned.add(m)
                    todo.append(m)
        comps.append(sorted(comp))
    return comps


class EdgeKind(str, enum.Enum):
    PLAIN = "plain"
    INBOUND = "inbound"
    INNER = "inner"
    OUTBOUND = "outbound"


@dataclass(frozen=True)
class SccNode:
    id: str
    members: tuple[str, ...]
    recursive: bool
    is_allocator: bool = False


@dataclass(frozen=True)
class DagEdge:
    """An edge of the condensed DAG.

    ``sites`` is the chain of original call sites this edge stands for; it has
    length one until single-caller elision splices edges together.
    """

    sites: tuple[str, ...]
    src: str
    dst: str
    order: tuple
    in_loop: bool


@dataclass
class CondensedDag:
    graph: FlowCallGraph
    sccs: dict[str, SccNode]
    scc_of: dict[str, str]
    dag_edges: list[DagEdge]
    inner_edges: list[CallSiteEdge]
    kind: dict[str, EdgeKind]
    entry: str = ""

    def out_edges(self, node: str) -> list[DagEdge]:
        return sorted((e for e in self.dag_edges if e.src == node), key=lambda e: e.order)

    def adjacency(self) -> dict[str, list[DagEdge]]:
        adj: dict[str, list[DagEdge]] = {n: [] for n in self.sccs}
        for e in self.dag_edges:
            adj[e.src].append(e)
        for lst in adj.values():
            lst.sort(key=lambda e: e.order)
        return adj

    def enters_scc(self, site: str) -> bool:
        """Call crosses into a recursive SCC from outside it."""
        e = self.graph.edges[site]
        a, b = self.scc_of[e.caller], self.scc_of[e.callee]
        return a != b and self._recursive(b)

    def leaves_scc(self, site: str) -> bool:
        e = self.graph.edges[site]
        a, b = self.scc_of[e.caller], self.scc_of[e.callee]
        return a != b and self._recursive(a)

    def _recursive(self, sid: str) -> bool:
        # elided nodes are never recursive
        node = self.sccs.get(sid)
        return node is not None and node.recursive


def _scc_id(members: list[str]) -> str:
    return members[0] if len(members) == 1 else "+".join(members)


def condense(g: FlowCallGraph) -> CondensedDag:
    succ: dict[str, list[str]] = defaultdict(list)
    for e in g.edges.values():
        succ[e.caller].append(e.callee)
    comps = kosaraju_sharir(g.nodes, lambda n: succ[n])
    self_loops = {e.caller for e in g.edges.values() if e.caller == e.callee}
    sccs: dict[str, SccNode] = {}
    scc_of: dict[str, str] = {}
    for members in comps:
        sid = _scc_id(members)
        recursive = len(members) > 1 or members[0] in self_loops
        sccs[sid] = SccNode(sid, tuple(members), recursive,
                            len(members) == 1 and g.is_allocator(members[0]))
        for m in members:
            scc_of[m] = sid

    dag_edges, inner, kind = [], [], {}
    for e in sorted(g.edges.values(), key=lambda e: e.site_id):
        a, b = scc_of[e.caller], scc_of[e.callee]
        if a == b:
            inner.append(e)
            kind[e.site_id] = EdgeKind.INNER
            continue
        # members of a multi-function SCC are ordered by function id, then site order
        dag_edges.append(DagEdge((e.site_id,), a, b, ((e.caller, e.order),), e.in_loop))
        if sccs[a].recursive:
            kind[e.site_id] = EdgeKind.OUTBOUND
        elif sccs[b].recursive:
            kind[e.site_id] = EdgeKind.INBOUND
        else:
            kind[e.site_id] = EdgeKind.PLAIN
    dag_edges.sort(key=lambda e: (e.src, e.order))
    return CondensedDag(g, sccs, scc_of, dag_edges, inner, kind, scc_of[g.entry])


def elide_single_callers(d: CondensedDag) -> CondensedDag:
    """Splice away every plain node that has exactly one incoming DAG edge.

    The spliced edge keeps the caller's position (orders concatenate) and is
    in a loop if either half was.  Repeats until nothing changes.
    """
    edges = list(d.dag_edges)
    sccs = dict(d.sccs)
    while True:
        indeg: dict[str, list[DagEdge]] = defaultdict(list)
        for e in edges:
            indeg[e.dst].append(e)
        victim = None
        for sid in sorted(sccs):
            node = sccs[sid]
            if node.is_allocator or node.recursive or sid == d.entry:
                continue
            if len(indeg[sid]) == 1:
                victim = sid
                break
        if victim is None:
            break
        (into,) = indeg[victim]
        outs = [e for e in edges if e.src == victim]
        spliced = [DagEdge(into.sites + o.sites, into.src, o.dst, into.order + o.order,
                           into.in_loop or o.in_loop) for o in outs]
        edges = [e for e in edges if e is not into and e.src != victim] + spliced
        del sccs[victim]
    edges.sort(key=lambda e: (e.src, e.order))
    return dataclasses.replace(d, sccs=sccs, dag_edges=edges)


# --- recurrence marking -----------------------------------------------------

def _recurrence_sources(g: FlowCallGraph) -> set[str]:
    """Edges that by themselves make a walk recurrent: loop call sites and any
    edge touching a recursive SCC."""
    d = condense(g)
    out = set()
    for e in g.edges.values():
        a, b = d.scc_of[e.caller], d.scc_of[e.callee]
        if e.in_loop or d.sccs[a].recursive or d.sccs[b].recursive:
            out.add(e.site_id)
    return out


def mark_recurrent(g: FlowCallGraph) -> FlowCallGraph:
    """Flag edges lying on some recurrent entry-to-allocator walk.

    Nothing is removed.  Edges and nodes on no recurrent walk end up in
    ``prunable_edges``/``prunable_nodes``.
    """
    rec = _recurrence_sources(g)
    succ: dict[str, list[str]] = defaultdict(list)
    pred: dict[str, list[str]] = defaultdict(list)
    for e in g.edges.values():
        succ[e.caller].append(e.callee)
        pred[e.callee].append(e.caller)
    from_entry = _reach([g.entry], lambda n: succ[n])
    to_alloc = _reach(g.allocators, lambda n: pred[n])
    # nodes reachable after some recurrent edge / able to reach one before an allocator
    after = _reach({g.edges[s].callee for s in rec if g.edges[s].caller in from_entry},
                   lambda n: succ[n])
    before = _reach({g.edges[s].caller for s in rec if g.edges[s].callee in to_alloc},
                    lambda n: pred[n])
    relevant = set()
    for e in g.edges.values():
        if e.caller not in from_entry or e.callee not in to_alloc:
            continue
        if e.site_id in rec or e.caller in after or e.callee in before:
            relevant.add(e.site_id)
    live_nodes = {n for s in relevant for n in (g.edges[s].caller, g.edges[s].callee)}
    return dataclasses.replace(
        g,
        recurrent_edges=frozenset(relevant),
        prunable_edges=frozenset(g.edges) - relevant,
        prunable_nodes=frozenset(g.nodes) - live_nodes,
    )


def recurrent_sites(g: FlowCallGraph) -> list[str]:
    """Allocation call sites reached by at least one recurrent walk."""
    return sorted(s for s in g.recurrent_edges if g.is_allocator(g.edges[s].callee))


def walk_is_recurrent(g: FlowCallGraph, sites: Iterable[str]) -> bool:
    rec = _recurrence_sources(g)
    return any(s in rec for s in sites)
