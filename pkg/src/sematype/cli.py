"""Command line: ``sematype analyze | replay | check-uaf | gen-trace``.

JSON goes to stdout (or ``--out``), diagnostics to stderr.  Exit codes: 0 ok,
1 segregation invariant violated, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass

from .callgraph import GraphError, condense, parse_graph, recurrent_sites
from .encoding import Layout
from .replay import (
    ReplayError,
    TraceError,
    UafProbe,
    check_uaf,
    format_trace,
    gen_trace,
    parse_trace,
    replay,
)
from .weights import PathLimitExceeded, build, enumerate_paths, security_profile

log = logging.getLogger("sematype")

EXIT_OK, EXIT_VIOLATION, EXIT_INPUT = 0, 1, 2
PATH_LISTING_CAP = 10_000


class InputError(Exception):
    pass


@dataclass(frozen=True)
class CliConfig:
    nid_bits: int = 16
    rid_bits: int = 14
    size_bits: int = 32
    seed: int = 0
    out: str | None = None

    @property
    def layout(self) -> Layout:
        return Layout(self.nid_bits, self.rid_bits, self.size_bits)

    @property
    def huge_threshold(self) -> int:
        return 1 << self.size_bits


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"{name}={raw!r} is not an integer") from None


def config_from_args(args) -> CliConfig:
    nid = args.nid_bits if args.nid_bits is not None else _env_int("SEMATYPE_NID_BITS", 16)
    rid = args.rid_bits if args.rid_bits is not None else _env_int("SEMATYPE_RID_BITS", 14)
    size = args.size_bits if args.size_bits is not None else _env_int("SEMATYPE_SIZE_BITS", 32)
    seed = args.seed if getattr(args, "seed", None) is not None else _env_int("SEMATYPE_SEED", 0)
    cfg = CliConfig(nid, rid, size, seed, args.out)
    try:
        cfg.layout
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return cfg


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def _load_graph(path: str):
    g = parse_graph(_read(path))
    return g, build(g)


def _emit(obj, cfg: CliConfig) -> None:
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=2) + "\n"
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def analysis_report(g, wd, cfg: CliConfig) -> dict:
    prof = security_profile(wd, cfg.rid_bits, cfg.nid_bits)
    d = wd.base
    report = {
        "entry": g.entry,
        "nodes": sorted(g.nodes),
        "sccs": [{"id": s.id, "members": list(s.members), "recursive": s.recursive}
                 for s in sorted(condense(wd.graph).sccs.values(), key=lambda s: s.id)],
        "dag_nodes": sorted(d.sccs),
        "edge_kinds": {s: d.kind[s].value for s in sorted(d.kind)},
        "node_weights": {n: wd.node_weight[n] for n in sorted(wd.node_weight)},
        "site_weights": {s: wd.site_weight[s] for s in sorted(wd.site_weight)},
        "dag_edges": [{"sites": list(e.sites), "src": e.src, "dst": e.dst,
                       "in_loop": e.in_loop, "weight": wd.edge_weight[e.sites]}
                      for e in d.dag_edges],
        "recurrent_sites": recurrent_sites(g_marked := wd.graph),
        "prunable_edges": sorted(g_marked.prunable_edges),
        "profile": prof.to_dict(),
        "nid_capacity": 1 << cfg.nid_bits,
        "capacity_warning": prof.capacity_warning,
    }
    total = sum(prof.paths_per_site.values())
    if total <= PATH_LISTING_CAP:
        paths = []
        for site in sorted(prof.paths_per_site):
            for p in enumerate_paths(wd, site):
                sites = [s for e in p for s in e.sites]
                recursive = d.sccs[wd.entry].recursive or any(d.sccs[e.dst].recursive for e in p)
                paths.append({"site": site, "sites": sites,
                              "nid": sum(wd.edge_weight[e.sites] for e in p),
                              "recursive": recursive})
        report["paths"] = paths
    else:
        report["paths"] = None
    return report


def cmd_analyze(args) -> int:
    cfg = config_from_args(args)
    g, wd = _load_graph(args.graph)
    report = analysis_report(g, wd, cfg)
    if report["capacity_warning"]:
        log.warning("entry has %d paths, more than the %d-bit nID can distinguish",
                    wd.node_weight[wd.entry], cfg.nid_bits)
    _emit(report, cfg)
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = config_from_args(args)
    g, wd = _load_graph(args.graph)
    events = parse_trace(_read(args.trace), g)
    rep = replay(wd, events, cfg.layout)
    for msg in rep.diagnostics:
        log.warning("%s", msg)
    _emit(rep.to_dict(), cfg)
    if rep.verdict != "pass":
        log.error("segregation invariant violated (%d violations)", len(rep.violations))
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_check_uaf(args) -> int:
    cfg = config_from_args(args)
    g, wd = _load_graph(args.graph)
    events = parse_trace(_read(args.trace), g)
    probe = UafProbe(args.dangling, tuple(args.attacker))
    _emit(check_uaf(wd, events, probe, cfg.layout), cfg)
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    cfg = config_from_args(args)
    g, wd = _load_graph(args.graph)
    try:
        events = gen_trace(wd, cfg.seed, args.events, args.recursion_bound, args.loop_bound,
                           args.free_prob, args.threads)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    text = format_trace(events)
    parse_trace(text, g)  # round-trip check
    _emit(text, cfg)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sematype", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("graph", help="call graph file")
        sp.add_argument("--nid-bits", type=int)
        sp.add_argument("--rid-bits", type=int)
        sp.add_argument("--size-bits", type=int)
        sp.add_argument("--out", help="write output here instead of stdout")

    sp = sub.add_parser("analyze", help="weights, path nIDs and security profile")
    common(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("replay", help="replay a trace through the simulated heap")
    common(sp)
    sp.add_argument("trace")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("check-uaf", help="can attacker objects land on a freed object?")
    common(sp)
    sp.add_argument("trace")
    sp.add_argument("--dangling", required=True, help="freed object id")
    sp.add_argument("--attacker", action="append", required=True, help="attacker object id (repeatable)")
    sp.set_defaults(func=cmd_check_uaf)

    sp = sub.add_parser("gen-trace", help="generate a random valid trace")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--events", type=int, default=200)
    sp.add_argument("--recursion-bound", type=int, default=3)
    sp.add_argument("--loop-bound", type=int, default=3)
    sp.add_argument("--free-prob", type=float, default=0.9)
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_gen_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InputError, GraphError, TraceError, ReplayError, PathLimitExceeded) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
