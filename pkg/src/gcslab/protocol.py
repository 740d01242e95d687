"""Per-node state machine: rate triggers, the logical clock step, and the
self-stabilizing tree / snapshot / reset machinery driven by the root."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .clocks import FAST, SLOW, HardwareRegression, LogicalClockState, advance
from .topology import (VIRTUAL, Arc, Edge, Node, NegativeCycleError, all_pairs_distances,
                       edge_key, has_negative_cycle, weighted_graph)

# ------------------------------------------------------------- triggers


def _least_above(x: float) -> int:
    """Least integer s >= 0 with s > x."""
    return max(0, math.floor(x) + 1)


def _greatest_below(y: float) -> float:
    """Greatest integer s with s < y, or -inf if that is negative."""
    s = math.ceil(y) - 1
    return s if s >= 0 else -math.inf


def slow_trigger_range(offsets: Sequence[float], deltas: Sequence[float]) -> Tuple[float, float]:
    """Interval [s_lo, s_hi] of levels at which the slow trigger's requirements meet."""
    s_lo = 0
    s_hi = -math.inf
    for o, d in zip(offsets, deltas):
        r = o / d
        # for all edges: o > -(4s+1) delta
        s_lo = max(s_lo, _least_above((-r - 1.0) / 4.0))
        # some edge: o > (4s-1) delta
        s_hi = max(s_hi, _greatest_below((r + 1.0) / 4.0))
    return s_lo, s_hi


def fast_trigger_range(offsets: Sequence[float], deltas: Sequence[float]) -> Tuple[float, float]:
    s_lo = 0
    s_hi = -math.inf
    for o, d in zip(offsets, deltas):
        r = o / d
        # for all edges: o < (4s+3) delta
        s_lo = max(s_lo, _least_above((r - 3.0) / 4.0))
        # some edge: o < -(4s+1) delta
        s_hi = max(s_hi, _greatest_below((-r - 1.0) / 4.0))
    return s_lo, s_hi


def eval_slow_trigger(offsets: Sequence[float], deltas: Sequence[float]) -> bool:
    if not offsets:
        return False
    lo, hi = slow_trigger_range(offsets, deltas)
    return lo <= hi


def eval_fast_trigger(offsets: Sequence[float], deltas: Sequence[float]) -> bool:
    if not offsets:
        return False
    lo, hi = fast_trigger_range(offsets, deltas)
    return lo <= hi


# --------------------------------------------------------------- params


@dataclass(frozen=True)
class ProtocolParams:
    mu: float
    theta: float
    zeta: float = 1.0
    T: float = 100.0
    check_period: float = 1.0
    epsilon: float = 1.0
    stabilize: bool = False
    # snapshot machinery
    reset_factor: float = 1.0
    round_gap_mult: float = 2.0
    reset_wait_mult: float = 2.0
    settle_time: float = 1.0
    max_round_gap: float = 1e6
    # test hooks: "", "invert-fast", "skip-reset"
    mutation: str = ""

    @property
    def external(self) -> bool:
        return self.zeta > 1.0

    @property
    def drift_rate(self) -> float:
        """theta - 1, or zeta - 1 once the virtual reference is in play."""
        return (self.zeta - 1.0) if self.external else (self.theta - 1.0)

    @property
    def sigma(self) -> float:
        d = self.drift_rate
        return math.inf if d <= 0 else self.mu / d

    @property
    def alpha(self) -> float:
        return 1.0

    @property
    def beta(self) -> float:
        return (1.0 + self.mu) * self.theta

    def check(self) -> List[str]:
        problems = []
        if self.mu <= 0:
            problems.append("mu must be positive")
        if self.theta < 1:
            problems.append("theta must be >= 1")
        if self.external and not (1 + 2 * (self.theta - 1) - 1e-12 <= self.zeta < 1 + self.mu):
            problems.append("zeta outside [1+2(theta-1), 1+mu)")
        return problems


# ------------------------------------------------------------- messages

MESSAGE_KINDS = ("tree-distance", "phase-init", "flood-capture", "convergecast-report",
                 "reset-order", "sync-beacon")


def _pack(value, out: List[bytes]) -> None:
    if value is None:
        out.append(b"N")
    elif isinstance(value, bool):
        out.append(b"B" + struct.pack(">?", value))
    elif isinstance(value, int):
        out.append(b"I" + struct.pack(">q", value))
    elif isinstance(value, float):
        out.append(b"F" + struct.pack(">d", value))
    elif isinstance(value, str):
        raw = value.encode()
        out.append(b"S" + struct.pack(">I", len(raw)) + raw)
    elif isinstance(value, (tuple, list)):
        out.append(b"T" + struct.pack(">I", len(value)))
        for x in value:
            _pack(x, out)
    elif isinstance(value, dict):
        items = sorted(value.items())
        out.append(b"D" + struct.pack(">I", len(items)))
        for k, x in items:
            _pack(k, out)
            _pack(x, out)
    else:
        raise TypeError(f"cannot serialize {type(value).__name__}")


@dataclass(frozen=True)
class Message:
    kind: str
    src: Node
    dst: Node
    payload: tuple = ()
    send_time: float = 0.0

    def to_bytes(self) -> bytes:
        """Canonical big-endian encoding: kind, src, dst, send time, payload."""
        out = [struct.pack(">Bqqd", MESSAGE_KINDS.index(self.kind), self.src, self.dst,
                           float(self.send_time))]
        _pack(tuple(self.payload), out)
        return b"".join(out)


# ---------------------------------------------------------------- state


@dataclass(frozen=True)
class TreeState:
    dist: Mapping[Node, float] = field(default_factory=dict)  # per-neighbor variable
    parent: Optional[Node] = None
    # latest claims from neighbors: neighbor -> (is my child, subtree depth)
    claims: Mapping[Node, Tuple[bool, float]] = field(default_factory=dict)

    def own_distance(self) -> float:
        return min(self.dist.values()) if self.dist else math.inf

    def children(self) -> List[Node]:
        return sorted(u for u, (child, _) in self.claims.items() if child)

    def subtree_depth(self, own: float) -> float:
        depth = own
        for child, sub in self.claims.values():
            if child:
                depth = max(depth, sub)
        return depth


@dataclass(frozen=True)
class SnapshotState:
    round_id: int = -1
    depth: float = 0.0
    captured: Optional[Mapping[Node, float]] = None
    capture_H: float = 0.0
    reports: Mapping[Node, tuple] = field(default_factory=dict)
    report_sent: bool = False
    reset_done: bool = False


@dataclass(frozen=True)
class RootState:
    phase: str = "idle"  # idle, init, capture, collect
    round_id: int = 0
    start_H: float = 0.0
    next_round_H: float = 0.0
    window: float = 1.0
    w_ref: float = 0.0


@dataclass(frozen=True)
class NodeState:
    node: Node
    clock: LogicalClockState
    offsets: Mapping[Node, float] = field(default_factory=dict)
    tree: TreeState = field(default_factory=TreeState)
    snap: SnapshotState = field(default_factory=SnapshotState)
    root: Optional[RootState] = None
    sync_estimate: Optional[float] = None

    @property
    def mode(self) -> str:
        return self.clock.mode


@dataclass(frozen=True)
class NodeContext:
    """Static knowledge of a node: neighbors, per-edge delta and delay."""
    node: Node
    neighbors: Tuple[Node, ...]
    delta: Mapping[Node, float]
    delay: Mapping[Node, float]
    is_root: bool = False
    # node whose clock anchors resets (root, or the virtual node)
    reference: Optional[Node] = None
    c: float = 1.0


@dataclass
class StepInput:
    H_now: float
    offsets: Optional[Mapping[Node, float]] = None
    messages: Sequence[Message] = ()
    timer: Optional[tuple] = None  # ("check",) or ("tree", neighbor)


@dataclass
class Effects:
    """Side information returned to the engine for logging."""
    reset_applied: Optional[float] = None
    captured: bool = False
    decision: Optional[dict] = None


# ------------------------------------------------------ rate control step


def choose_mode(offsets: Mapping[Node, float], ctx: NodeContext, params: ProtocolParams) -> str:
    nb = ctx.neighbors
    o = [offsets[w] for w in nb]
    d = [ctx.delta[w] for w in nb]
    fast = eval_fast_trigger(o, d)
    if params.mutation == "invert-fast":
        fast = not fast
    return FAST if fast else SLOW


def computational_step(st: NodeState, inp: StepInput, ctx: NodeContext,
                       params: ProtocolParams) -> Tuple[NodeState, List[Message], Effects]:
    """One step: fold elapsed time into L, handle messages/timers, re-pick the mode."""
    if inp.H_now < st.clock.H_last:
        raise HardwareRegression(f"node {st.node}: {inp.H_now} < {st.clock.H_last}")
    clock = advance(st.clock, inp.H_now, params.mu)
    offsets = st.offsets if inp.offsets is None else inp.offsets
    st = replace(st, clock=clock, offsets=offsets)
    out: List[Message] = []
    fx = Effects()
    if params.stabilize:
        if inp.timer is not None and inp.timer[0] == "tree":
            st, msgs = tree_step(st, None, inp.timer[1], ctx)
            out.extend(msgs)
        for m in inp.messages:
            if m.kind == "tree-distance":
                st, msgs = tree_step(st, m, None, ctx)
                out.extend(msgs)
            else:
                st, msgs = snapshot_step(st, m, inp.H_now, ctx, params, fx)
                out.extend(msgs)
        if ctx.is_root and inp.timer is not None and inp.timer[0] == "check":
            st, msgs = root_tick(st, inp.H_now, ctx, params, fx)
            out.extend(msgs)
    if len(offsets) == len(ctx.neighbors):
        mode = choose_mode(offsets, ctx, params)
        if mode != st.clock.mode:
            st = replace(st, clock=LogicalClockState(st.clock.L, st.clock.H_last, mode))
    return st, out, fx


# ------------------------------------------------------------------ tree


def tree_step(st: NodeState, msg: Optional[Message], edge_timer: Optional[Node],
              ctx: NodeContext) -> Tuple[NodeState, List[Message]]:
    """Bellman-Ford maintenance of the delay-weighted shortest-path tree.

    A timer on edge e makes the node send its current distance (0 at the root)
    on e.  Receiving distance x over edge {v, w} sets v's variable for w to
    x + d_{v,w} and re-picks the parent as the argmin, lowest id on ties.
    """
    tree = st.tree
    if msg is not None:
        u = msg.src
        x, parent, sub = msg.payload
        claims = dict(tree.claims)
        claims[u] = (parent == st.node, float(sub))
        if ctx.is_root:
            return replace(st, tree=TreeState({}, None, claims)), []
        dist = dict(tree.dist)
        dist[u] = float(x) + ctx.delay[u]
        best = min(_real_neighbors(ctx), key=lambda w: (dist.get(w, math.inf), w))
        return replace(st, tree=TreeState(dist, best, claims)), []
    w = edge_timer
    if ctx.is_root:
        own, parent = 0.0, None
    else:
        own, parent = tree.own_distance(), tree.parent
    payload = (float(own), parent if parent is not None else -2, float(tree.subtree_depth(own)))
    return st, [Message("tree-distance", st.node, w, payload)]


# -------------------------------------------------------------- snapshot


def flood_edges(ctx: NodeContext, depth: float) -> List[Node]:
    """Neighbors over edges light enough for the capture flood."""
    return [w for w in ctx.neighbors if ctx.delay[w] <= 2.0 * depth and w != VIRTUAL]


def _real_neighbors(ctx: NodeContext) -> List[Node]:
    return [w for w in ctx.neighbors if w != VIRTUAL]


def _capture(st: NodeState, H_now: float) -> NodeState:
    snap = replace(st.snap, captured=dict(st.offsets), capture_H=H_now)
    return replace(st, snap=snap)


def _maybe_report(st: NodeState, ctx: NodeContext) -> Tuple[NodeState, List[Message]]:
    """Send the aggregated subtree report up once every child has reported."""
    snap = st.snap
    if snap.captured is None or snap.report_sent or ctx.is_root:
        return st, []
    kids = [u for u in st.tree.children() if u in ctx.neighbors]
    if any(u not in snap.reports for u in kids):
        return st, []
    entries = [(st.node, w, float(o), ctx.delta[w]) for w, o in sorted(snap.captured.items())]
    for u in kids:
        entries.extend(snap.reports[u])
    parent = st.tree.parent
    st = replace(st, snap=replace(snap, report_sent=True))
    if parent is None or parent not in ctx.neighbors:
        return st, []
    return st, [Message("convergecast-report", st.node, parent, (snap.round_id, tuple(entries)))]


def snapshot_step(st: NodeState, m: Message, H_now: float, ctx: NodeContext,
                  params: ProtocolParams, fx: Effects) -> Tuple[NodeState, List[Message]]:
    out: List[Message] = []
    snap = st.snap
    if m.kind == "phase-init":
        rid, depth = m.payload
        if rid != snap.round_id:
            st = replace(st, snap=SnapshotState(round_id=rid, depth=float(depth)))
            for u in st.tree.children():
                if u in ctx.neighbors and u != VIRTUAL:
                    out.append(Message("phase-init", st.node, u, (rid, depth)))
        return st, out
    if m.kind == "flood-capture":
        rid, depth = m.payload
        if rid != snap.round_id:
            # missed the init: adopt the round with a clean slate
            st = replace(st, snap=SnapshotState(round_id=rid, depth=float(depth)))
        if st.snap.captured is not None:
            return st, out
        st = _capture(st, H_now)
        fx.captured = True
        for w in flood_edges(ctx, st.snap.depth):
            out.append(Message("flood-capture", st.node, w, (rid, depth)))
        st, msgs = _maybe_report(st, ctx)
        return st, out + msgs
    if m.kind == "convergecast-report":
        rid, entries = m.payload
        if rid != snap.round_id:
            return st, out
        reports = dict(snap.reports)
        reports[m.src] = entries
        st = replace(st, snap=replace(snap, reports=reports))
        if ctx.is_root:
            return _root_try_decide(st, H_now, ctx, params, fx)
        return _maybe_report(st, ctx)
    if m.kind == "reset-order":
        rid, ell = m.payload
        if snap.reset_done or rid != snap.round_id:
            return st, out
        shift = dict(ell).get(st.node, 0.0)
        clock = replace(st.clock, L=st.clock.L + shift)
        st = replace(st, clock=clock, snap=replace(snap, reset_done=True))
        fx.reset_applied = shift
        for w in flood_edges(ctx, st.snap.depth):
            out.append(Message("reset-order", st.node, w, (rid, ell)))
        return st, out
    if m.kind == "sync-beacon":
        rid, est = m.payload
        st = replace(st, sync_estimate=dict(est).get(st.node))
        for u in st.tree.children():
            if u in ctx.neighbors and u != VIRTUAL:
                out.append(Message("sync-beacon", st.node, u, (rid, est)))
        return st, out
    return st, out


# ------------------------------------------------------------ root logic


def phase_window(depth: float, theta: float) -> float:
    """Length of one phase window in root hardware time."""
    return max(4.0 * (2.0 * depth) * theta, 1.0)


def root_tick(st: NodeState, H_now: float, ctx: NodeContext, params: ProtocolParams,
              fx: Effects) -> Tuple[NodeState, List[Message]]:
    rs = st.root or RootState()
    out: List[Message] = []
    # a corrupted schedule must not stall the routine forever
    if rs.next_round_H - H_now > params.max_round_gap or rs.start_H > H_now:
        rs = replace(rs, phase="idle", next_round_H=H_now, start_H=H_now)
    depth = st.tree.subtree_depth(0.0)
    if rs.phase == "idle":
        if H_now >= rs.next_round_H:
            rid = rs.round_id + 1
            lam = phase_window(depth, params.theta)
            rs = RootState("init", rid, H_now, H_now + 4 * lam, lam, rs.w_ref)
            st = replace(st, snap=SnapshotState(round_id=rid, depth=depth))
            for u in st.tree.children():
                if u in ctx.neighbors and u != VIRTUAL:
                    out.append(Message("phase-init", st.node, u, (rid, depth)))
        return replace(st, root=rs), out
    if rs.phase == "init" and H_now >= rs.start_H + rs.window:
        rs = replace(rs, phase="capture")
        st = replace(st, root=rs)
        st = _capture(st, H_now)
        fx.captured = True
        for w in flood_edges(ctx, st.snap.depth):
            out.append(Message("flood-capture", st.node, w, (rs.round_id, st.snap.depth)))
        st, msgs = _root_try_decide(st, H_now, ctx, params, fx)
        return st, out + msgs
    if rs.phase == "capture" and H_now >= rs.start_H + 3 * rs.window:
        # convergecast did not complete in time: abort the round
        fx.decision = {"round": rs.round_id, "aborted": True}
        gap = _round_gap(rs, params)
        rs = replace(rs, phase="idle", next_round_H=H_now + gap)
        return replace(st, root=rs), out
    return replace(st, root=rs), out


def _round_gap(rs: RootState, params: ProtocolParams) -> float:
    gap = params.round_gap_mult * rs.w_ref / params.mu
    return min(max(gap, 4 * rs.window), params.max_round_gap)


def _root_try_decide(st: NodeState, H_now: float, ctx: NodeContext, params: ProtocolParams,
                     fx: Effects) -> Tuple[NodeState, List[Message]]:
    rs = st.root
    snap = st.snap
    if rs is None or rs.phase != "capture" or snap.captured is None:
        return st, []
    kids = [u for u in st.tree.children() if u in ctx.neighbors]
    if any(u not in snap.reports for u in kids):
        return st, []
    captures: Dict[Arc, float] = {}
    deltas: Dict[Edge, float] = {}
    for w, o in snap.captured.items():
        captures[(st.node, w)] = float(o)
        deltas[edge_key(st.node, w)] = ctx.delta[w]
    for u in kids:
        for v, w, o, d in snap.reports[u]:
            captures[(v, w)] = float(o)
            deltas[edge_key(v, w)] = float(d)
    out: List[Message] = []
    try:
        ref = ctx.reference if ctx.reference is not None else st.node
        est = estimate_from_captures(captures, deltas, ref, ctx.c)
    except (ValueError, NegativeCycleError) as exc:
        fx.decision = {"round": rs.round_id, "aborted": True, "reason": str(exc)}
        rs = replace(rs, phase="idle", next_round_H=H_now + _round_gap(rs, params))
        return replace(st, root=rs), out
    threshold = params.reset_factor * (2 + params.epsilon) * est.w_ref / (params.sigma - 1)
    do_reset = est.psi > threshold and params.mutation != "skip-reset"
    fx.decision = {"round": rs.round_id, "aborted": False, "psi": est.psi, "s0_tilde": est.s0_tilde,
                   "w_ref": est.w_ref, "w_delta": est.w_delta, "threshold": threshold,
                   "reset": do_reset, "ell": dict(est.ell)}
    rs = replace(rs, w_ref=est.w_ref)
    if do_reset:
        ell = tuple(sorted(est.ell.items()))
        own = dict(ell).get(st.node, 0.0)
        clock = replace(st.clock, L=st.clock.L + own)
        st = replace(st, clock=clock, snap=replace(snap, reset_done=True))
        fx.reset_applied = own
        for w in flood_edges(ctx, snap.depth):
            out.append(Message("reset-order", st.node, w, (rs.round_id, ell)))
        wait = params.reset_wait_mult * (params.theta * params.settle_time + est.w_ref / params.mu)
        rs = replace(rs, phase="idle", next_round_H=H_now + rs.window + min(wait, params.max_round_gap))
    else:
        beacon = tuple(sorted(est.offsets_to_reference.items()))
        for u in kids:
            if u != VIRTUAL:
                out.append(Message("sync-beacon", st.node, u, (rs.round_id, beacon)))
        rs = replace(rs, phase="idle", next_round_H=H_now + _round_gap(rs, params))
    return replace(st, root=rs), out


# ------------------------------------------------------------- estimator


@dataclass(frozen=True)
class Estimate:
    s0_tilde: int
    level_q: int
    psi: float
    w_ref: float
    w_delta: float
    neg_dist: Mapping[Arc, float]
    ell: Mapping[Node, float]
    offsets_to_reference: Mapping[Node, float]


def _delta_diameter(nodes: Sequence[Node], delta: Mapping[Edge, float]) -> float:
    import heapq

    adj: Dict[Node, List[Tuple[Node, float]]] = {v: [] for v in nodes}
    for (u, v), d in delta.items():
        adj[u].append((v, d))
        adj[v].append((u, d))
    best = 0.0
    for s in nodes:
        dist = {s: 0.0}
        heap = [(0.0, s)]
        while heap:
            d, x = heapq.heappop(heap)
            if d > dist[x]:
                continue
            for y, w in adj[x]:
                if d + w < dist.get(y, math.inf):
                    dist[y] = d + w
                    heapq.heappush(heap, (d + w, y))
        if len(dist) < len(nodes):
            raise ValueError("captured graph is disconnected")
        best = max(best, max(dist.values()))
    return best


def estimate_from_captures(captures: Mapping[Arc, float], delta: Mapping[Edge, float],
                           reference: Node, c: float = 1.0) -> Estimate:
    """Root-side estimate from captured offsets.

    ``captures[(v, w)]`` is o_{v,w}(t_v).  Arcs to the virtual node are completed
    with o_{v0,v} := -o_{v,v0}.
    """
    caps = dict(captures)
    for (v, w), o in list(caps.items()):
        if w == VIRTUAL and (w, v) not in caps:
            caps[(w, v)] = -o
    nodes = sorted({x for a in caps for x in a})
    omega: Dict[Arc, float] = {}
    for (v, w), o in caps.items():
        back = caps.get((w, v))
        if back is None:
            raise ValueError(f"missing capture for arc {(w, v)}")
        omega[(v, w)] = (o - back) / 2.0
    dmap = {edge_key(v, w): delta[edge_key(v, w)] for (v, w) in omega}

    def graph(q: int):
        return weighted_graph(nodes, {(v, w): q * dmap[edge_key(v, w)] - om for (v, w), om in omega.items()}, q)

    s = 0
    while has_negative_cycle(graph(4 * s)):
        s += 1
        if s > 10 ** 6:
            raise ValueError("no non-negative level found")
    q = 4 * s + int(round(4 * c)) + 8
    m = all_pairs_distances(graph(q))
    w_delta = _delta_diameter(nodes, dmap)
    neg = {k: -d for k, d in m.dist.items()}
    psi = 2.0 * w_delta + max(neg.values())
    # round trips cancel the clock terms hidden in omega, leaving a skew-free diameter
    w_ref = max((m(v, w) + m(w, v)) / 2.0 for v in nodes for w in nodes)
    ref = reference if reference in nodes else nodes[0]
    # midpoint of the two one-sided estimates of L_v - L_ref
    est = {v: (-m(v, ref) + m(ref, v)) / 2.0 for v in nodes}
    ell = {v: -est[v] for v in nodes if v != VIRTUAL}
    return Estimate(s, q, psi, w_ref, w_delta, neg, ell, est)


def attach_virtual_reference(sc, zeta: float):
    """Scenario over H = G + v0; see adversary.scenario_external for the full builder."""
    from .adversary import with_virtual_reference

    return with_virtual_reference(sc, zeta)
