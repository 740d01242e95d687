import math
import random

import networkx as nx
import pytest
from hypothesis import given, strategies as st

from gcslab.topology import (NegativeCycleError, Topology, all_pairs_distances, build_level_graph,
                             compute_s0, cycle, delay_diameter, diameter, estimate_distance_diameter,
                             grid, has_negative_cycle, line, max_path_delta, shortest_path_tree,
                             validate_topology, with_virtual, VIRTUAL)

from conftest import brute_force_s0, connected_atlas, topology_from_nx


def single_edge(delta=1.0, delay=1.0, c=1.0):
    return Topology.build([0, 1], [(0, 1)], delta, delay, c=c)


# ---------------------------------------------------------------- validate

def test_validate_accepts_coupled_edge():
    assert validate_topology(single_edge(1.0, 1.0), 1.0, 1.5) == []


def test_validate_flags_slow_edge():
    rep = validate_topology(single_edge(1.0, 10.0), 1.0, 1.5)
    assert [v.kind for v in rep] == ["delay-coupling"]
    assert rep[0].edge == (0, 1)


def test_validate_flags_disconnected():
    t = Topology.build([0, 1, 2], [(0, 1)], 1.0, 1.0)
    assert "disconnected" in [v.kind for v in validate_topology(t, 1.0, 1.1)]


def test_validate_flags_self_loop_and_bad_delta():
    t = Topology((0, 1), ((0, 0), (0, 1)), {(0, 0): 1.0, (0, 1): -1.0}, {(0, 0): 1.0, (0, 1): 1.0}, 0)
    kinds = {v.kind for v in validate_topology(t, 1.0, 1.1)}
    assert {"self-loop", "delta"} <= kinds


# ------------------------------------------------------------ level graphs

def test_level_graph_weights_single_edge():
    g = build_level_graph(single_edge(), {(0, 1): 0.5}, 4)
    assert g.weight[(0, 1)] == pytest.approx(3.5)
    assert g.weight[(1, 0)] == pytest.approx(4.5)


def test_level_zero_without_offsets_is_flat(triangle):
    g = build_level_graph(triangle, {}, 0)
    assert set(g.weight.values()) == {0.0}


def test_rejects_non_antisymmetric_offsets():
    with pytest.raises(ValueError):
        build_level_graph(single_edge(), {(0, 1): 0.5, (1, 0): 0.4}, 4)


def test_triangle_cycle_weight(triangle, cyclic_offsets):
    g = build_level_graph(triangle, cyclic_offsets, 4)
    total = g.weight[(0, 1)] + g.weight[(1, 2)] + g.weight[(2, 0)]
    assert total == pytest.approx(-3.0)
    assert has_negative_cycle(g)


def test_triangle_clean_at_level_two(triangle, cyclic_offsets):
    g = build_level_graph(triangle, cyclic_offsets, 8)
    assert not has_negative_cycle(g)
    # enumerate every simple cycle of the bidirected triangle
    dg = nx.DiGraph()
    dg.add_weighted_edges_from((u, v, w) for (u, v), w in g.weight.items())
    for cyc in nx.simple_cycles(dg):
        w = sum(g.weight[(a, b)] for a, b in zip(cyc, cyc[1:] + cyc[:1]))
        assert w >= 0


def test_s0_triangle(triangle, cyclic_offsets):
    assert compute_s0(triangle, cyclic_offsets) == 1
    assert has_negative_cycle(build_level_graph(triangle, cyclic_offsets, 4))
    assert not has_negative_cycle(build_level_graph(triangle, cyclic_offsets, 6))


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.floats(0.01, 3))
def test_trees_have_level_zero(offs, delta):
    t = Topology.build(range(5), [(0, 1), (1, 2), (1, 3), (3, 4)], delta, 1.0)
    O = {e: o for e, o in zip(t.edges, offs)}
    assert not has_negative_cycle(build_level_graph(t, O, 0))
    assert compute_s0(t, O) == 0


def test_zero_offsets_give_level_zero():
    for t in (cycle(5, 0.3, 1.0), grid(3, 3, 0.1, 1.0), line(4, 1.0, 1.0)):
        assert compute_s0(t, {}) == 0


def test_s0_matches_cycle_enumeration_on_random_graphs():
    rng = random.Random(3)
    graphs = [g for g in connected_atlas(5) if g.number_of_edges() >= g.number_of_nodes()]
    for g in rng.sample(graphs, 15):
        t = topology_from_nx(g, {e: rng.uniform(0.1, 2.0) for e in
                                 sorted((min(u, v), max(u, v)) for u, v in g.edges())})
        O = {e: rng.uniform(-6, 6) for e in t.edges}
        full = dict(O)
        full.update({(b, a): -x for (a, b), x in O.items()})
        assert compute_s0(t, O) == brute_force_s0(t, full)


# --------------------------------------------------------------- distances

def test_single_edge_distances():
    m = all_pairs_distances(build_level_graph(single_edge(), {(0, 1): 0.5}, 4))
    assert m(0, 1) == pytest.approx(3.5)
    assert m(1, 0) == pytest.approx(4.5)
    assert m(0, 1) + m(1, 0) == pytest.approx(8.0)
    assert diameter(m) == pytest.approx(4.5)


def test_line_distances():
    m = all_pairs_distances(build_level_graph(line(3, 1.0, 1.0), {}, 4))
    assert m(0, 1) == 4 and m(0, 2) == 8
    assert diameter(m) == 8


def test_triangle_distance_prefers_direct_arc(triangle, cyclic_offsets):
    m = all_pairs_distances(build_level_graph(triangle, cyclic_offsets, 8))
    # direct arc 8-5 against the detour 0->2->1 of weight (8+5)+(8+5)
    assert m(0, 1) == pytest.approx(3.0)


def test_single_node_diameter():
    t = Topology.build([0], [], 1.0, 1.0)
    assert diameter(all_pairs_distances(build_level_graph(t, {}, 4))) == 0


def test_negative_cycle_raises(triangle, cyclic_offsets):
    with pytest.raises(NegativeCycleError):
        all_pairs_distances(build_level_graph(triangle, cyclic_offsets, 4))


@given(st.integers(0, 200), st.integers(0, 6))
def test_distances_match_networkx(seed, extra):
    rng = random.Random(seed)
    n = rng.randint(2, 6)
    g = nx.gnm_random_graph(n, min(n - 1 + extra, n * (n - 1) // 2), seed=seed)
    if not nx.is_connected(g):
        return
    t = topology_from_nx(g, {e: rng.uniform(0.1, 2) for e in
                             sorted((min(u, v), max(u, v)) for u, v in g.edges())})
    O = {e: rng.uniform(-1, 1) for e in t.edges}
    s0 = compute_s0(t, O)
    lg = build_level_graph(t, O, 4 * (s0 + 1))
    m = all_pairs_distances(lg)
    dg = nx.DiGraph()
    dg.add_nodes_from(t.nodes)
    dg.add_weighted_edges_from((u, v, w) for (u, v), w in lg.weight.items())
    ref = nx.floyd_warshall(dg)
    for v in t.nodes:
        for w in t.nodes:
            assert m(v, w) == pytest.approx(ref[v][w], abs=1e-9)
            # distances in both directions close a cycle, so their sum is non-negative
            assert m(v, w) + m(w, v) >= -1e-9


# ---------------------------------------------------------------- diameters

def test_estimate_diameter_examples():
    assert estimate_distance_diameter(line(3, 1.0, 1.0)) == 2
    assert estimate_distance_diameter(single_edge(3.0)) == 3
    assert estimate_distance_diameter(cycle(4, 1.0, 1.0)) == 2


def test_delay_diameter_line():
    assert delay_diameter(line(5, 1.0, 0.5)) == 2.0


def test_max_path_delta_cycle():
    # the longest simple path on a 4-cycle uses three edges
    assert max_path_delta(cycle(4, 1.0, 1.0)) == 3.0


def test_shortest_path_tree_matches_networkx():
    rng = random.Random(5)
    for g in rng.sample(connected_atlas(6), 30):
        delay = {e: rng.choice([0.5, 1.0, 1.5]) for e in
                 sorted((min(u, v), max(u, v)) for u, v in g.edges())}
        t = topology_from_nx(g, 1.0, delay)
        dist, parent = shortest_path_tree(t)
        ng = nx.Graph()
        ng.add_weighted_edges_from((u, v, d) for (u, v), d in delay.items())
        ref = nx.single_source_dijkstra_path_length(ng, t.root)
        for v in t.nodes:
            assert dist[v] == pytest.approx(ref[v])
            if v != t.root:
                p = parent[v]
                assert dist[p] + t.delay_of(p, v) == pytest.approx(dist[v])


def test_with_virtual_adds_reference_edges():
    t = Topology.build(range(3), [(0, 1), (1, 2)], 0.1, 1.0, refs=(2,))
    h = with_virtual(t, {2: 0.05}, 1.0)
    assert VIRTUAL in h.nodes and h.virtual == VIRTUAL
    assert (VIRTUAL, 2) in h.edges
    assert h.real_nodes() == (0, 1, 2)
    # one extra hop: the diameter of H is D + 1
    assert nx.diameter(nx.Graph(list(h.edges))) == 3


def test_with_virtual_needs_references():
    with pytest.raises(ValueError):
        with_virtual(line(3, 1.0, 1.0), {}, 1.0)
