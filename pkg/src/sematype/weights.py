"""Collision-free call-site weights on the condensed DAG, path nIDs and the
security profile derived from path counts."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .callgraph import (
    CondensedDag,
    DagEdge,
    FlowCallGraph,
    condense,
    elide_single_callers,
    mark_recurrent,
    trim_to_allocators,
)

PATH_GUARD = 10**6


class PathLimitExceeded(RuntimeError):
    pass


class PathError(ValueError):
    pass


@dataclass
class WeightedDag:
    base: CondensedDag
    edge_weight: dict[tuple[str, ...], int]
    node_weight: dict[str, int]
    topo_order: list[str]
    # weight charged at each original call site; the last site of a spliced
    # edge carries the whole edge weight, every other site zero
    site_weight: dict[str, int] = field(default_factory=dict)
    source: FlowCallGraph | None = None

    @property
    def graph(self) -> FlowCallGraph:
        return self.base.graph

    @property
    def entry(self) -> str:
        return self.base.entry

    def weight(self, e: DagEdge) -> int:
        return self.edge_weight[e.sites]


def topological_order(d: CondensedDag) -> list[str]:
    """Kahn's algorithm; ties go to the smallest node id."""
    indeg = {n: 0 for n in d.sccs}
    for e in d.dag_edges:
        indeg[e.dst] += 1
    heap = [n for n, k in indeg.items() if k == 0]
    heapq.heapify(heap)
    adj = d.adjacency()
    order = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for e in adj[n]:
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                heapq.heappush(heap, e.dst)
    if len(order) != len(indeg):
        raise RuntimeError("condensed graph contains a cycle")
    return order


def assign_weights(d: CondensedDag) -> WeightedDag:
    order = topological_order(d)
    adj = d.adjacency()
    node_w: dict[str, int] = {}
    edge_w: dict[tuple[str, ...], int] = {}
    # callees before callers
    for n in reversed(order):
        w = 0
        for e in adj[n]:
            edge_w[e.sites] = w
            w += max(1, node_w[e.dst])
        node_w[n] = w
    site_w = {s: 0 for s in d.graph.edges}
    for sites, w in edge_w.items():
        site_w[sites[-1]] = w
    return WeightedDag(d, edge_w, node_w, order, site_w)


def build(g: FlowCallGraph, elide: bool = True) -> WeightedDag:
    """parse output -> trim -> mark -> condense -> (elide) -> weights."""
    trimmed = mark_recurrent(trim_to_allocators(g))
    d = condense(trimmed)
    if elide:
        d = elide_single_callers(d)
    wd = assign_weights(d)
    wd.source = g
    return wd


def path_nid(wd: WeightedDag, path: list[DagEdge]) -> int:
    if not path:
        raise PathError("empty path")
    at = wd.entry
    total = 0
    for e in path:
        if e.src != at or e.sites not in wd.edge_weight:
            raise PathError(f"path is disconnected at {at!r}")
        total += wd.edge_weight[e.sites]
        at = e.dst
    if not wd.base.sccs[at].is_allocator:
        raise PathError(f"path ends at non-allocator {at!r}")
    return total


def enumerate_paths(wd: WeightedDag, site: str | None = None, source: str | None = None,
                    limit: int = PATH_GUARD) -> list[list[DagEdge]]:
    """All walks from ``source`` (default: entry) to ``site``.

    With ``site=None`` every maximal walk is returned, i.e. walks ending at
    any node without outgoing edges.
    """
    adj = wd.base.adjacency()
    start = wd.entry if source is None else source
    out: list[list[DagEdge]] = []
    path: list[DagEdge] = []
    stack = [iter(adj[start])]
    if (site is None and not adj[start]) or start == site:
        return [[]]
    while stack:
        e = next(stack[-1], None)
        if e is None:
            stack.pop()
            if path:
                path.pop()
            continue
        path.append(e)
        if e.dst == site or (site is None and not adj[e.dst]):
            out.append(list(path))
            if len(out) > limit:
                raise PathLimitExceeded(f"more than {limit} paths")
            path.pop()
        elif site is not None and wd.base.sccs[e.dst].is_allocator:
            path.pop()
        else:
            stack.append(iter(adj[e.dst]))
    return out


def count_paths(wd: WeightedDag, site: str) -> int:
    """Entry-to-site path count by dynamic programming."""
    adj = wd.base.adjacency()
    memo: dict[str, int] = {}
    for n in reversed(wd.topo_order):
        memo[n] = 1 if n == site else sum(memo[e.dst] for e in adj[n])
    return memo[wd.entry]


@dataclass
class SecurityProfile:
    n_sites: int
    paths_per_site: dict[str, int]
    scc_nodes_per_path: dict[str, list[int]]
    k_loop_sites_any: int
    k_loop_sites_all: int
    min_sematypes: int
    max_sematypes: int
    rid_bits: int
    nid_bits: int
    capacity_warning: bool

    def to_dict(self) -> dict:
        return {
            "n_sites": self.n_sites,
            "paths_per_site": dict(self.paths_per_site),
            "scc_nodes_per_path": {k: list(v) for k, v in self.scc_nodes_per_path.items()},
            "k_loop_sites_any": self.k_loop_sites_any,
            "k_loop_sites_all": self.k_loop_sites_all,
            "min_sematypes": self.min_sematypes,
            "max_sematypes": self.max_sematypes,
            "rid_bits": self.rid_bits,
            "nid_bits": self.nid_bits,
            "capacity_warning": self.capacity_warning,
        }


def security_profile(wd: WeightedDag, rid_bits: int = 14, nid_bits: int = 16,
                     limit: int = PATH_GUARD) -> SecurityProfile:
    sites = sorted(n for n, s in wd.base.sccs.items() if s.is_allocator)
    per_site, r_values = {}, {}
    k_any = k_all = 0
    lo = hi = 0
    for site in sites:
        paths = enumerate_paths(wd, site, limit=limit)
        per_site[site] = len(paths)
        entry_rec = int(wd.base.sccs[wd.entry].recursive)
        rs = [entry_rec + sum(wd.base.sccs[e.dst].recursive for e in p) for p in paths]
        r_values[site] = rs
        looped = [any(e.in_loop for e in p) for p in paths]
        k_any += any(looped)
        k_all += bool(looped) and all(looped)
        lo += len(paths)
        # a trace through no recursive SCC has exactly one rID value
        hi += sum((1 << rid_bits) if r else 1 for r in rs)
    return SecurityProfile(
        n_sites=len(sites),
        paths_per_site=per_site,
        scc_nodes_per_path=r_values,
        k_loop_sites_any=k_any,
        k_loop_sites_all=k_all,
        min_sematypes=lo,
        max_sematypes=hi,
        rid_bits=rid_bits,
        nid_bits=nid_bits,
        capacity_warning=wd.node_weight[wd.entry] > (1 << nid_bits),
    )
