from pathlib import Path

import pytest

from sematype.callgraph import parse_graph
from sematype.replay import parse_trace
from sematype.weights import build

FIXTURES = Path(__file__).parent / "fixtures"


def load_graph(name):
    return parse_graph((FIXTURES / name).read_text())


def trace(text, g=None):
    return parse_trace(text, g)


@pytest.fixture(scope="session")
def demo():
    return load_graph("demo.graph")


@pytest.fixture(scope="session")
def demo_wd(demo):
    return build(demo)


# demo traces A-I as call-site sequences, up to the allocation call
DEMO_TRACES = {
    "A": ["main_a", "a_e_l"],
    "B": ["main_a", "a_e_r"],
    "C": ["main_a", "a_d"],
    "D": ["main_a", "a_d", "d_e"],
    "E": ["main_b", "b_c"],
    "F": ["main_b", "b_c", "c_f", "f_g"],
    "G": ["main_b", "b_c", "c_f", "f_g", "g_c"],
    "H": ["main_b", "b_c", "c_f", "f_g", "g_c", "c_f", "f_g"],
    "I": ["main_b", "b_c", "c_f", "f_g", "g_c", "c_f", "f_g", "g_c"],
}


def demo_trace_text(name, obj=None, tid=0, size=32):
    sites = DEMO_TRACES[name]
    lines = [f"T{tid} call {s}" for s in sites]
    lines.append(f"T{tid} alloc {obj or name} {size}")
    lines += [f"T{tid} ret"] * len(sites)
    return "\n".join(lines) + "\n"
