"""Pseudo-random flow call graphs for property tests and benchmarks."""

from __future__ import annotations

import random

from .callgraph import CallSiteEdge, FlowCallGraph, FunctionNode


def random_call_graph(seed: int, n_funcs: int = 12, max_out: int = 4, n_allocs: int = 1,
                      p_loop: float = 0.2, p_back: float = 0.0, p_self: float = 0.0,
                      p_indirect: float = 0.1) -> FlowCallGraph:
    """Random graph with ``f0`` as entry and allocators ``m0..``.

    Forward edges keep every function reachable from the entry and able to
    reach an allocator; ``p_back`` adds backward edges (hence SCCs).
    Duplicate caller/callee pairs are allowed and stay distinct call sites.
    """
    rng = random.Random(seed)
    funcs = [f"f{i}" for i in range(n_funcs)]
    allocs = [f"m{i}" for i in range(n_allocs)]
    nodes = {f: FunctionNode(f) for f in funcs}
    nodes.update({m: FunctionNode(m, True) for m in allocs})
    calls: dict[str, list[str]] = {f: [] for f in funcs}

    for i in range(1, n_funcs):
        calls[funcs[rng.randrange(i)]].append(funcs[i])
    for i, f in enumerate(funcs):
        room = max_out - len(calls[f])
        if room <= 0:
            continue
        want = rng.randint(1 if not calls[f] else 0, room)
        for _ in range(want):
            r = rng.random()
            if r < p_self:
                calls[f].append(f)
            elif r < p_self + p_back and i > 0:
                calls[f].append(funcs[rng.randrange(1, i + 1)] if i > 1 else f)
            elif i + 1 < n_funcs and rng.random() < 0.6:
                calls[f].append(funcs[rng.randrange(i + 1, n_funcs)])
            else:
                calls[f].append(rng.choice(allocs))
    # every function needs a forward route to an allocator
    rank = {f: i for i, f in enumerate(funcs)}
    for i, f in enumerate(funcs):
        if not any(c in allocs or rank[c] > i for c in calls[f]):
            if len(calls[f]) < max_out:
                calls[f].append(rng.choice(allocs))
            else:
                # never drop the tree edge that makes a callee reachable
                backs = [k for k, c in enumerate(calls[f]) if c not in allocs and rank[c] <= i]
                calls[f][backs[-1]] = rng.choice(allocs)

    edges = {}
    for f in funcs:
        rng.shuffle(calls[f])
        for k, callee in enumerate(calls[f]):
            sid = f"{f}_{k}"
            edges[sid] = CallSiteEdge(sid, f, callee, k, rng.random() < p_loop,
                                      rng.random() < p_indirect)
    return FlowCallGraph(nodes, edges, funcs[0])
