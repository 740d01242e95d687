import itertools
import math

import networkx as nx
import pytest
from hypothesis import HealthCheck, settings

from gcslab.topology import Topology

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def connected_atlas(max_nodes=6):
    """All connected graphs with 2..max_nodes nodes, up to isomorphism."""
    out = []
    for g in nx.graph_atlas_g():
        if 2 <= g.number_of_nodes() <= max_nodes and nx.is_connected(g):
            out.append(g)
    return out


def topology_from_nx(g, delta=1.0, delay=1.0, c=1.0):
    nodes = sorted(g.nodes())
    edges = sorted((min(u, v), max(u, v)) for u, v in g.edges())
    dl = delta if isinstance(delta, dict) else {e: delta for e in edges}
    dy = delay if isinstance(delay, dict) else {e: delay for e in edges}
    return Topology.build(nodes, edges, dl, dy, c=c)


def brute_force_s0(topo, O, max_s=200):
    """Least s whose half-level graph has no negative simple cycle, by enumeration."""
    g = nx.DiGraph()
    for (u, v) in topo.edges:
        g.add_edge(u, v)
        g.add_edge(v, u)
    cycles = [c for c in nx.simple_cycles(g) if len(c) >= 2]

    def ok(q):
        for cyc in cycles:
            w = 0.0
            for a, b in zip(cyc, cyc[1:] + cyc[:1]):
                w += q * topo.delta_of(a, b) - O[(a, b)]
            if w < -1e-9:
                return False
        return True

    for s in range(max_s):
        if ok(4 * s + 2):
            return s
    raise AssertionError("no level found")


@pytest.fixture
def triangle():
    return Topology.build([0, 1, 2], [(0, 1), (1, 2), (0, 2)], 1.0, 1.0)


@pytest.fixture
def cyclic_offsets():
    # +5 on each arc of the cycle 0 -> 1 -> 2 -> 0
    O = {(0, 1): 5.0, (1, 2): 5.0, (2, 0): 5.0}
    O.update({(b, a): -x for (a, b), x in list(O.items())})
    return O


CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line; printed again in the terminal summary."""
    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        print(line)
        CRITERIA.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
