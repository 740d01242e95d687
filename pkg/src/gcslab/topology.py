"""Network topology, level graphs and the shortest-path machinery on them.

Levels are kept as integer quarter units ``q`` so that the level ``s`` equals
``q / 4``.  Integer levels are multiples of 4, half-integer levels are even.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

Node = int
Edge = Tuple[Node, Node]
Arc = Tuple[Node, Node]

EPS_NUM = 1e-9

# id used for the virtual reference node of external synchronization
VIRTUAL = -1


def edge_key(u: Node, v: Node) -> Edge:
    return (u, v) if u <= v else (v, u)


def node_label(v: Node) -> str:
    return "v0" if v == VIRTUAL else str(v)


class NegativeCycleError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    nodes: Tuple[Node, ...]
    edges: Tuple[Edge, ...]
    delta: Mapping[Edge, float]
    delay: Mapping[Edge, float]
    root: Node
    refs: frozenset = frozenset()
    c: float = 1.0
    # edges touching the virtual node; they carry estimates but no messages
    virtual: Optional[Node] = None

    @staticmethod
    def build(nodes: Iterable[Node], edges: Iterable[Tuple[Node, Node]], delta, delay,
              root: Optional[Node] = None, refs: Iterable[Node] = (), c: float = 1.0) -> "Topology":
        """Convenience constructor.  ``delta``/``delay`` may be scalars or per-edge maps."""
        nodes = tuple(sorted(set(nodes)))
        keys = tuple(edge_key(u, v) for u, v in edges)
        dmap = {e: float(delta[e] if isinstance(delta, Mapping) else delta) for e in keys}
        lmap = {e: float(delay[e] if isinstance(delay, Mapping) else delay) for e in keys}
        return Topology(nodes, keys, dmap, lmap, nodes[0] if root is None else root,
                        frozenset(refs), float(c))

    def neighbors(self) -> Dict[Node, List[Node]]:
        nb: Dict[Node, List[Node]] = {v: [] for v in self.nodes}
        for u, v in self.edges:
            nb[u].append(v)
            nb[v].append(u)
        for v in nb:
            nb[v].sort()
        return nb

    def arcs(self) -> List[Arc]:
        out = []
        for u, v in self.edges:
            out.append((u, v))
            out.append((v, u))
        return sorted(out)

    def delta_of(self, u: Node, v: Node) -> float:
        return self.delta[edge_key(u, v)]

    def delay_of(self, u: Node, v: Node) -> float:
        return self.delay[edge_key(u, v)]

    def real_nodes(self) -> Tuple[Node, ...]:
        return tuple(v for v in self.nodes if v != self.virtual)

    def real_edges(self) -> Tuple[Edge, ...]:
        if self.virtual is None:
            return self.edges
        return tuple(e for e in self.edges if self.virtual not in e)


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    edge: Optional[Edge] = None


def _connected(nodes, edges) -> bool:
    if not nodes:
        return True
    adj: Dict[Node, set] = {v: set() for v in nodes}
    for u, v in edges:
        if u in adj and v in adj:
            adj[u].add(v)
            adj[v].add(u)
    start = next(iter(nodes))
    seen = {start}
    stack = [start]
    while stack:
        x = stack.pop()
        for y in adj[x]:
            if y not in seen:
                seen.add(y)
                stack.append(y)
    return len(seen) == len(nodes)


def validate_topology(t: Topology, alpha: float, beta: float) -> List[Violation]:
    """Return every violated structural invariant; an empty list means valid."""
    report: List[Violation] = []
    nodes = set(t.nodes)
    if len(nodes) != len(t.nodes):
        report.append(Violation("duplicate-node", "node ids repeat"))
    seen = set()
    for e in t.edges:
        u, v = e
        if u == v:
            report.append(Violation("self-loop", f"self loop at {u}", e))
        if u not in nodes or v not in nodes:
            report.append(Violation("unknown-node", f"edge {e} references unknown node", e))
        k = edge_key(u, v)
        if k in seen:
            report.append(Violation("multi-edge", f"parallel edge {k}", k))
        seen.add(k)
    if not _connected(nodes, t.edges):
        report.append(Violation("disconnected", "graph is not connected"))
    if t.root not in nodes:
        report.append(Violation("root", f"root {t.root} not a node"))
    if not set(t.refs) <= nodes:
        report.append(Violation("refs", "reference set not contained in nodes"))
    for e in t.edges:
        k = edge_key(*e)
        d = t.delta.get(k)
        dl = t.delay.get(k)
        if d is None or d <= 0:
            report.append(Violation("delta", f"delta on {k} must be positive", k))
            continue
        if dl is None or dl <= 0:
            report.append(Violation("delay", f"delay on {k} must be positive", k))
            continue
        if t.virtual is not None and t.virtual in k:
            continue
        if t.c * d < (beta - alpha) * dl - EPS_NUM:
            report.append(Violation(
                "delay-coupling",
                f"c*delta={t.c * d:.6g} < (beta-alpha)*d={(beta - alpha) * dl:.6g} on {k}", k))
    return report


@dataclass(frozen=True)
class LevelGraph:
    nodes: Tuple[Node, ...]
    weight: Mapping[Arc, float]
    q: int

    @property
    def level(self) -> float:
        return self.q / 4.0


def complete_offsets(t: Topology, offsets: Mapping[Arc, float], tol: float = EPS_NUM) -> Dict[Arc, float]:
    """Fill missing reverse arcs with -O and reject maps that are not antisymmetric."""
    full: Dict[Arc, float] = {}
    for u, v in t.edges:
        a = offsets.get((u, v))
        b = offsets.get((v, u))
        if a is None and b is None:
            a = b = 0.0
        elif a is None:
            a = -b
        elif b is None:
            b = -a
        if abs(a + b) > tol:
            raise ValueError(f"offsets not antisymmetric on {(u, v)}: {a} vs {b}")
        full[(u, v)] = float(a)
        full[(v, u)] = float(b)
    return full


def build_level_graph(t: Topology, offsets: Mapping[Arc, float], q: int,
                      tol: float = EPS_NUM) -> LevelGraph:
    if q < 0:
        raise ValueError("level must be non-negative")
    full = complete_offsets(t, offsets, tol)
    w = {(u, v): q * t.delta_of(u, v) - o for (u, v), o in full.items()}
    return LevelGraph(t.nodes, w, q)


def weighted_graph(nodes: Iterable[Node], weight: Mapping[Arc, float], q: int = -1) -> LevelGraph:
    """Wrap an arbitrary arc-weight map so the distance routines apply to it."""
    return LevelGraph(tuple(sorted(set(nodes))), dict(weight), q)


def has_negative_cycle(g: LevelGraph, tol: float = 1e-12) -> bool:
    """Bellman-Ford from a virtual super-source joined to every node with weight 0."""
    dist = {v: 0.0 for v in g.nodes}
    arcs = list(g.weight.items())
    for _ in range(len(g.nodes)):
        changed = False
        for (u, v), w in arcs:
            nd = dist[u] + w
            if nd < dist[v] - tol:
                dist[v] = nd
                changed = True
        if not changed:
            return False
    # still relaxing after |V| rounds (|V|+1 nodes with the super-source)
    for (u, v), w in arcs:
        if dist[u] + w < dist[v] - tol:
            return True
    return False


def _level_bracket(t: Topology, offsets: Mapping[Arc, float]) -> int:
    """Quarter level at which every arc weight is non-negative (Delta_e = |O_e| + delta_e)."""
    hi = 0
    for (u, v), o in offsets.items():
        d = t.delta_of(u, v)
        big = abs(o) + d
        hi = max(hi, 4 * math.ceil(big / (4 * d)))
    return hi


def compute_s0(t: Topology, offsets: Mapping[Arc, float], tol: float = EPS_NUM) -> int:
    """Least integer s0 such that the level s0 + 1/2 graph has no negative cycle."""
    full = complete_offsets(t, offsets, tol)
    if not t.edges:
        return 0
    # binary search on integer s, testing quarter level 4s + 2
    lo, hi = 0, _level_bracket(t, full) // 4
    while has_negative_cycle(build_level_graph(t, full, 4 * hi + 2)):
        hi = 2 * hi + 1
    while lo < hi:
        mid = (lo + hi) // 2
        if has_negative_cycle(build_level_graph(t, full, 4 * mid + 2)):
            lo = mid + 1
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class DistanceMatrix:
    nodes: Tuple[Node, ...]
    dist: Mapping[Arc, float]
    q: int = -1

    def __call__(self, v: Node, w: Node) -> float:
        return self.dist[(v, w)]

    def as_rows(self) -> List[List[float]]:
        return [[self.dist[(v, w)] for w in self.nodes] for v in self.nodes]


def all_pairs_distances(g: LevelGraph) -> DistanceMatrix:
    """Floyd-Warshall; raises NegativeCycleError if some cycle has negative weight."""
    nodes = list(g.nodes)
    idx = {v: i for i, v in enumerate(nodes)}
    n = len(nodes)
    inf = math.inf
    d = [[inf] * n for _ in range(n)]
    for i in range(n):
        d[i][i] = 0.0
    for (u, v), w in g.weight.items():
        i, j = idx[u], idx[v]
        if w < d[i][j]:
            d[i][j] = w
    for k in range(n):
        dk = d[k]
        for i in range(n):
            dik = d[i][k]
            if dik == inf:
                continue
            di = d[i]
            for j in range(n):
                nd = dik + dk[j]
                if nd < di[j]:
                    di[j] = nd
    for i in range(n):
        if d[i][i] < -EPS_NUM:
            raise NegativeCycleError(f"negative cycle through {nodes[i]}")
        d[i][i] = 0.0
    dist = {(nodes[i], nodes[j]): d[i][j] for i in range(n) for j in range(n)}
    return DistanceMatrix(tuple(nodes), dist, g.q)


def diameter(m: DistanceMatrix) -> float:
    if not m.dist:
        return 0.0
    return max(m.dist.values())


def _dijkstra(t: Topology, src: Node, length: Mapping[Edge, float]) -> Dict[Node, float]:
    nb = t.neighbors()
    dist = {src: 0.0}
    heap = [(0.0, src)]
    done = set()
    while heap:
        d, x = heapq.heappop(heap)
        if x in done:
            continue
        done.add(x)
        for y in nb[x]:
            nd = d + length[edge_key(x, y)]
            if nd < dist.get(y, math.inf):
                dist[y] = nd
                heapq.heappush(heap, (nd, y))
    return dist


def weighted_diameter(t: Topology, length: Mapping[Edge, float]) -> float:
    best = 0.0
    for v in t.nodes:
        dist = _dijkstra(t, v, length)
        if len(dist) < len(t.nodes):
            return math.inf
        best = max(best, max(dist.values()))
    return best


def estimate_distance_diameter(t: Topology) -> float:
    """Diameter of the graph weighted by the per-edge drift bounds."""
    return weighted_diameter(t, t.delta)


def delay_diameter(t: Topology) -> float:
    return weighted_diameter(t, t.delay)


def shortest_path_tree(t: Topology, tol: float = EPS_NUM) -> Tuple[Dict[Node, float], Dict[Node, Optional[Node]]]:
    """Delay-weighted distances from the root and parents, ties broken by lowest id."""
    dist = _dijkstra(t, t.root, t.delay)
    nb = t.neighbors()
    parent: Dict[Node, Optional[Node]] = {t.root: None}
    for v in t.nodes:
        if v == t.root:
            continue
        best = None
        for u in nb[v]:
            cand = dist[u] + t.delay_of(u, v)
            if abs(cand - dist[v]) <= tol:
                best = u
                break
        parent[v] = best
    return dist, parent


def max_path_delta(t: Topology) -> float:
    """Largest delta-length of a simple path (exponential; small graphs only)."""
    nb = t.neighbors()
    best = 0.0

    def walk(x, seen, acc):
        nonlocal best
        best = max(best, acc)
        for y in nb[x]:
            if y not in seen:
                seen.add(y)
                walk(y, seen, acc + t.delta_of(x, y))
                seen.remove(y)

    if len(t.nodes) > 12:
        # fall back to a cheap over-estimate on larger graphs
        return sum(t.delta.values())
    for v in t.nodes:
        walk(v, {v}, 0.0)
    return best


# ----------------------------------------------------------------- shapes

def line(n_nodes: int, delta: float, delay: float, c: float = 1.0) -> Topology:
    nodes = range(n_nodes)
    edges = [(i, i + 1) for i in range(n_nodes - 1)]
    return Topology.build(nodes, edges, delta, delay, root=0, refs=(), c=c)


def cycle(n_nodes: int, delta: float, delay: float, c: float = 1.0) -> Topology:
    nodes = range(n_nodes)
    edges = [(i, (i + 1) % n_nodes) for i in range(n_nodes)]
    return Topology.build(nodes, edges, delta, delay, root=0, c=c)


def grid(rows: int, cols: int, delta: float, delay: float, c: float = 1.0) -> Topology:
    nodes = range(rows * cols)
    edges = []
    for r in range(rows):
        for k in range(cols):
            i = r * cols + k
            if k + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return Topology.build(nodes, edges, delta, delay, root=0, c=c)


def with_virtual(t: Topology, ref_delta: Mapping[Node, float], ref_delay: float) -> Topology:
    """Add the virtual reference node joined to every node of ``t.refs``."""
    if not t.refs:
        raise ValueError("reference set R is empty")
    nodes = tuple(sorted(t.nodes + (VIRTUAL,)))
    edges = list(t.edges)
    delta = dict(t.delta)
    delay = dict(t.delay)
    for v in sorted(t.refs):
        k = edge_key(VIRTUAL, v)
        edges.append(k)
        delta[k] = float(ref_delta[v])
        delay[k] = float(ref_delay)
    return Topology(nodes, tuple(edges), delta, delay, t.root, t.refs, t.c, VIRTUAL)
