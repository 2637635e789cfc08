"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are written
straight to the terminal even when output is captured.
"""

import random
import time
from collections import defaultdict

import networkx as nx
import pytest

from sematype.cli import CliConfig, analysis_report
from sematype.corpus import random_call_graph
from sematype.encoding import Layout, SemaTypeTag, decode, encode
from sematype.replay import UafProbe, check_uaf, gen_trace, parse_trace, replay
from sematype.tracker import InstrumentationPlan, SyntheticFrameModel, ThreadTracker
from sematype.weights import build, enumerate_paths, path_nid

from conftest import DEMO_TRACES, FIXTURES, load_graph

MAX_PATHS = 10**4


@pytest.fixture
def verdict(capsys, request):
    def report(ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {request.node.name}: {detail}")
        assert ok, detail
    return report


# --- shared corpora ---------------------------------------------------------

def _dag_corpus(n=1000, seed=2024):
    """Random weighted DAGs: <= 30 functions with <= 4 call sites each, <= 1e4 paths.

    Splicing single-caller functions can leave more than four edges on a
    condensed node; the bound is on the graph as generated.
    """
    rng = random.Random(seed)
    out, s = [], 0
    while len(out) < n:
        s += 1
        g = random_call_graph(s, n_funcs=rng.randint(4, 27), max_out=4,
                              n_allocs=rng.randint(1, 3), p_loop=0.2,
                              p_back=rng.choice([0.0, 0.1, 0.25]), p_self=0.05)
        wd = build(g)
        if wd.node_weight[wd.entry] > MAX_PATHS or len(wd.base.sccs) > 30:
            continue
        out.append(wd)
    return out


@pytest.fixture(scope="module")
def dag_corpus():
    t0 = time.perf_counter()
    corpus = _dag_corpus()
    return corpus, time.perf_counter() - t0


def _walk_count(wd, start):
    # independent DP over the condensed adjacency: maximal walks from start
    memo = {}
    adj = wd.base.adjacency()
    for n in reversed(wd.topo_order):
        memo[n] = 1 if not adj[n] else sum(memo[e.dst] for e in adj[n])
    return memo[start]


def _scc_inner_sites(g):
    mg = nx.MultiDiGraph()
    mg.add_nodes_from(g.nodes)
    mg.add_edges_from((e.caller, e.callee) for e in g.edges.values())
    comp = {}
    for k, members in enumerate(nx.strongly_connected_components(mg)):
        for m in members:
            comp[m] = k
    return {s for s, e in g.edges.items() if comp[e.caller] == comp[e.callee]}


def _dag_path(wd, sites):
    """Condensed-DAG path spelled by a sequence of non-intra-SCC call sites."""
    adj = wd.base.adjacency()
    node, path, i = wd.entry, [], 0
    while i < len(sites):
        for e in adj[node]:
            if tuple(sites[i:i + len(e.sites)]) == e.sites:
                path.append(e)
                i += len(e.sites)
                node = e.dst
                break
        else:
            raise AssertionError(f"no DAG edge for {sites[i:]} at {node}")
    return path


# --- criteria ---------------------------------------------------------------

def test_nid_uniqueness(dag_corpus, verdict):
    corpus, build_secs = dag_corpus
    t0 = time.perf_counter()
    bad, total = 0, 0
    for wd in corpus:
        paths = enumerate_paths(wd)
        nids = [path_nid(wd, p) for p in paths]
        total += len(nids)
        if len(set(nids)) != len(nids):
            bad += 1
        # dense: the nIDs are exactly 0 .. (#paths - 1)
        if sorted(nids) != list(range(_walk_count(wd, wd.entry))):
            bad += 1
    secs = build_secs + time.perf_counter() - t0
    verdict(bad == 0 and len(corpus) >= 1000 and secs < 60,
            f"{len(corpus)} DAGs, {total} paths, {bad} collisions, {secs:.1f}s")


def test_walk_sum_below_node_weight(dag_corpus, verdict):
    corpus, _ = dag_corpus
    bad, walks = 0, 0
    for wd in corpus:
        adj = wd.base.adjacency()
        for f in wd.base.sccs:
            if not adj[f]:
                continue
            for p in enumerate_paths(wd, source=f):
                walks += 1
                if not sum(wd.edge_weight[e.sites] for e in p) < wd.node_weight[f]:
                    bad += 1
    verdict(bad == 0, f"{walks} walks from every node, {bad} exceptions")


def test_nid_constant_across_rounds(verdict):
    traces, grouped, bad, seed = 0, 0, 0, 0
    nid_mask = (1 << 16) - 1
    while traces < 200:
        seed += 1
        g = random_call_graph(seed, n_funcs=10, n_allocs=2, p_back=0.3, p_self=0.1, p_loop=0.2)
        inner = _scc_inner_sites(g)
        if not inner:
            continue
        wd = build(g)
        rep = replay(wd, gen_trace(wd, seed, 400, recursion_bound=4))
        by_external = defaultdict(set)
        recurrent = False
        for _, stack, tag in rep.alloc_tags:
            external = tuple(s for s in stack if s not in inner)
            recurrent |= len(external) != len(stack)
            by_external[external].add((tag.nid, stack))
            if tag.nid != path_nid(wd, _dag_path(wd, list(external))) & nid_mask:
                bad += 1
        for seen in by_external.values():
            if len({n for n, _ in seen}) != 1:
                bad += 1
            if len(seen) > 1:
                grouped += 1
        traces += recurrent
    verdict(bad == 0, f"{traces} recurrent traces, {grouped} externals seen with several "
                      f"round counts, {bad} exceptions")


def test_demo_graph_fixture(demo, demo_wd, verdict):
    model = SyntheticFrameModel()
    problems = []

    rep = analysis_report(demo, demo_wd, CliConfig())
    by_sites = {tuple(p["sites"]): p["nid"] for p in rep["paths"]}
    alloc = {"A": "e_malloc", "B": "e_malloc", "C": "d_malloc", "D": "e_malloc"}
    ad = [by_sites[tuple(DEMO_TRACES[k] + [alloc[k]])] for k in "ABCD"]
    if len(set(ad)) != 4:
        problems.append(f"A-D nids {ad}")

    def run(sites, alloc_site, tamper=None):
        t = ThreadTracker(InstrumentationPlan(demo_wd))
        for s in sites:
            t.on_call(s)
        # the outbound call to malloc folds the stack into h, so look first
        frames = list(t.scc_stack)
        if tamper:
            tamper(t.scc_stack)
        t.on_call(alloc_site)
        return t.on_alloc(), frames

    def alg2(frames):
        # oracle: bits 6-7 of each frame as base-4 digits, seven newest kept
        digits = "".join(str((p >> 6) & 3) for p in frames) or "0"
        return int(digits, 4) % 4**7

    # F and F with one or two more c->f->g rounds
    family = [DEMO_TRACES["F"] + ["g_c", "c_f", "f_g"] * k for k in range(3)]
    tags = []
    for k, sites in enumerate(family):
        tag, frames = run(sites, "g_malloc")
        fns = ["main", "b"] + ["c", "f", "g"] * (k + 1)
        expect = [model.address(fns[:i]) for i in range(2, len(fns))]
        if frames != expect or tag.rid != alg2(expect):
            problems.append(f"rid mismatch after {k} extra rounds")
        tags.append(tag)
    if len({t.nid for t in tags}) != 1:
        problems.append(f"F-family nids {[t.nid for t in tags]}")
    # the E/G/I family leaves through c->malloc and shares one nid as well
    egi = {run(DEMO_TRACES[k], "c_malloc")[0].nid for k in "EGI"}
    if len(egi) != 1:
        problems.append(f"E/G/I nids {egi}")

    # the eighth-oldest frame is outside the window; the seventh is not
    deep = DEMO_TRACES["F"] + ["g_c", "c_f", "f_g"] * 3
    base_tag, frames = run(deep, "g_malloc")
    for bits in range(4):
        def set8(stack, bits=bits):
            stack[-8] = (stack[-8] & ~0xC0) | (bits << 6)
        if run(deep, "g_malloc", set8)[0].rid != base_tag.rid:
            problems.append("8th-oldest frame changed rid")
    changed = {run(deep, "g_malloc", lambda s, b=b: s.__setitem__(-7, (s[-7] & ~0xC0) | (b << 6)))[0].rid
               for b in range(4)}
    if len(changed) != 4:
        problems.append("7th-oldest frame does not feed rid")

    verdict(not problems, "; ".join(problems) or
            f"A-D nids {ad}; F-family nid {tags[0].nid} rids {[t.rid for t in tags]}; window ok")


def test_encoding_round_trip(verdict):
    t0 = time.perf_counter()
    bad = 0
    lay = Layout()
    nmax, rmax, smax = (1 << lay.nid_bits) - 1, (1 << lay.rid_bits) - 1, (1 << lay.size_bits) - 1
    for loop in (False, True):
        for nid in (0, 1, nmax - 1, nmax):
            for rid in (0, 1, rmax - 1, rmax):
                for size in (1, 2, smax - 1, smax):
                    t = SemaTypeTag(loop, nid, rid)
                    bad += decode(encode(t, size)) != ("regular", t, size)
    rng = random.Random(7)
    for _ in range(10**6):
        t = SemaTypeTag(rng.random() < 0.5, rng.getrandbits(16), rng.getrandbits(14))
        size = rng.randint(1, smax)
        bad += decode(encode(t, size)) != ("regular", t, size)
    for _ in range(10**6):
        s = rng.getrandbits(32)
        bad += decode(s)[2] != s
    secs = time.perf_counter() - t0
    verdict(bad == 0 and secs < 30, f"2x10^6 random + boundary product, {bad} mismatches, {secs:.1f}s")


@pytest.fixture(scope="module")
def churn_corpus():
    out = []
    for seed in range(500):
        g = random_call_graph(seed, n_funcs=8 + seed % 8, n_allocs=1 + seed % 3,
                              p_back=(0.0, 0.2, 0.35)[seed % 3], p_self=0.05, p_loop=0.3)
        wd = build(g)
        ev = gen_trace(wd, seed, 400, recursion_bound=3, loop_bound=4, free_prob=0.95,
                       n_threads=1 + seed % 4, sizes=(16, 24, 32, 64, 100))
        out.append(replay(wd, ev))
    return out


def _overlapping_pairs(objects):
    recs = sorted(objects, key=lambda r: r.interval[0])
    active = []
    for r in recs:
        active = [a for a in active if a.interval[1] > r.interval[0]]
        for a in active:
            yield a, r
        active.append(r)


def test_segregation(churn_corpus, verdict):
    fails = sum(rep.verdict != "pass" for rep in churn_corpus)
    bad = pairs = 0
    for rep in churn_corpus:
        for a, b in _overlapping_pairs(rep.objects.values()):
            pairs += 1
            old, new = sorted((a, b), key=lambda r: r.alloc_index)
            ok = (old.tag.loop and new.tag.loop
                  and (old.tid, old.tag.nid, old.tag.rid, old.class_bytes)
                  == (new.tid, new.tag.nid, new.tag.rid, new.class_bytes)
                  and old.free_index is not None and old.free_index < new.alloc_index)
            bad += not ok
    frees = sum(rep.stats["frees"] for rep in churn_corpus)
    reuses = sum(rep.stats["reuses"] for rep in churn_corpus)
    verdict(fails == 0 and bad == 0 and reuses > 0,
            f"{len(churn_corpus)} replays, {frees} frees, {reuses} reuses, {pairs} overlapping "
            f"pairs, {fails} failing verdicts, {bad} oracle violations")


HAND_LEAKS = {
    ("stats.graph", "stats.trace"): 64,
    ("demo.graph", "leak_owner.trace"): 160,
    ("demo.graph", "leak_cross.trace"): 4176,
}


def test_one_time_no_reuse(churn_corpus, verdict):
    reissued = 0
    one_time = 0
    for rep in churn_corpus:
        reissued += rep.stats["one_time_reissued"]
        for a, b in _overlapping_pairs(rep.objects.values()):
            reissued += (not a.tag.loop) or (not b.tag.loop)
        one_time += sum(not r.tag.loop for r in rep.objects.values())
    leaks = {}
    for (gname, tname), want in HAND_LEAKS.items():
        g = load_graph(gname)
        rep = replay(build(g), parse_trace((FIXTURES / tname).read_text(), g))
        leaks[tname] = (rep.stats["leak_bytes"], want)
    ok = reissued == 0 and all(got == want for got, want in leaks.values())
    verdict(ok, f"{one_time} one-time blocks, {reissued} re-issued; leak bytes (got, hand) {leaks}")


def test_uaf_probes(verdict):
    g = load_graph("uaf.graph")
    wd = build(g)
    events = parse_trace((FIXTURES / "uaf.trace").read_text(), g)
    probes = {"different nid": "r1", "same tag, same thread": "p3",
              "same tag, other thread": "q1"}
    want = ["blocked", "overlap", "blocked"]
    got = [check_uaf(wd, events, UafProbe("p2", (o,)))["attackers"][o]["verdict"]
           for o in probes.values()]
    verdict(got == want, ", ".join(f"{k}: {v}" for k, v in zip(probes, got)))


def test_stats_fidelity(verdict):
    g = load_graph("stats.graph")
    rep = replay(build(g), parse_trace((FIXTURES / "stats.trace").read_text(), g))
    s = rep.stats
    # hand tally: 1 one-time + 50 worker + 49 helper allocations, two SemaTypes in loops
    want = {"allocs": 100, "recurrent_allocs": 99, "recurrent_pct": 99.0,
            "recurrent_pools": 2, "avg_allocs_per_recurrent_pool": 49.5}
    got = {k: s[k] for k in want}
    verdict(got == want, f"{got}")
