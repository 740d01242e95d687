"""Discrete-event simulator driving the per-node protocol over a scenario."""
from __future__ import annotations

import hashlib
import heapq
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .adversary import (FaultSpec, Scenario, _garbage_state, corrupt_initial_state,
                        delay_diameter_real, rng_for)
from .clocks import FAST, SLOW, LogicalClockState, logical_value
from .protocol import (Message, NodeContext, NodeState, StepInput, computational_step)
from .topology import VIRTUAL, Node

log = logging.getLogger(__name__)

# priorities among simultaneous events
P_DELIVER, P_FAULT, P_TIMER, P_HW, P_TICK = 0, 1, 2, 3, 4

# sample kinds
S_TICK, S_HW, S_PRE, S_POST = 0, 1, 2, 3


class SimulationError(RuntimeError):
    pass


@dataclass
class Trace:
    """Sampled run.  Between consecutive samples every logical clock is linear."""
    scenario: Scenario
    nodes: List[Node]
    t: np.ndarray
    L: np.ndarray            # samples x nodes
    H: np.ndarray
    fast: np.ndarray         # samples x nodes (bool)
    kind: np.ndarray
    arcs: List[Tuple[Node, Node]]
    tick_t: np.ndarray
    tick_index: np.ndarray   # error-grid index used at each refresh
    offsets: np.ndarray      # refreshes x arcs, held estimates after each refresh
    refresh_sample: np.ndarray  # sample row recorded right after each refresh
    events: List[dict] = field(default_factory=list)
    n_messages: int = 0
    n_events: int = 0
    final_states: Dict[Node, NodeState] = field(default_factory=dict)
    in_flight: Optional[np.ndarray] = None
    final_parents: Optional[Dict[Node, Optional[Node]]] = None

    def parents(self) -> Dict[Node, Optional[Node]]:
        """Tree parent of every real node at the end of the run."""
        if self.final_parents is not None:
            return dict(self.final_parents)
        return {v: s.tree.parent for v, s in self.final_states.items()}

    def column(self, v: Node) -> int:
        return self.nodes.index(v)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.t, self.L, self.H, self.fast.astype(np.int8), self.offsets):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(repr(self.events).encode())
        return h.hexdigest()

    def events_of(self, kind: str) -> List[dict]:
        return [e for e in self.events if e["kind"] == kind]

    def to_rows(self):
        """Flat rows (t, node, L, H, mode) for CSV export."""
        for i in range(len(self.t)):
            for j, v in enumerate(self.nodes):
                yield (float(self.t[i]), v, float(self.L[i, j]), float(self.H[i, j]),
                       FAST if self.fast[i, j] else SLOW)


class Simulator:
    def __init__(self, sc: Scenario, max_events: int = 50_000_000):
        self.sc = sc
        self.topo = sc.topology
        self.params = sc.params
        self.max_events = max_events
        self.real = list(self.topo.real_nodes())
        self.nodes = list(self.topo.nodes)
        self.virtual = self.topo.virtual
        nb = self.topo.neighbors()
        ref = VIRTUAL if self.virtual is not None else self.topo.root
        self.ctx: Dict[Node, NodeContext] = {}
        for v in self.real:
            self.ctx[v] = NodeContext(
                v, tuple(nb[v]), {w: self.topo.delta_of(v, w) for w in nb[v]},
                {w: self.topo.delay_of(v, w) for w in nb[v]},
                is_root=(v == self.topo.root), reference=ref, c=self.topo.c)
        self.arcs = [(v, w) for v in self.real for w in nb[v]]
        if sc.est_step * self.params.theta > self.params.check_period + 1e-12:
            raise ValueError("estimate refresh slower than the check period")
        self.states: Dict[Node, NodeState] = {}
        for v in self.real:
            if sc.initial_states is not None and v in sc.initial_states:
                self.states[v] = sc.initial_states[v]
            else:
                self.states[v] = NodeState(v, LogicalClockState(sc.initial_L.get(v, 0.0), 0.0, SLOW))
        self.v0_offset = sc.initial_L.get(VIRTUAL, 0.0)
        self.heap: list = []
        self.seq = 0
        self.delay_rng = rng_for(sc.seed, "delay")
        self.events: List[dict] = []
        self.n_messages = 0
        self.n_events = 0
        # sample buffers
        self._t: List[float] = []
        self._L: List[List[float]] = []
        self._H: List[List[float]] = []
        self._F: List[List[bool]] = []
        self._K: List[int] = []
        self._tick_t: List[float] = []
        self._tick_k: List[int] = []
        self._tick_o: List[List[float]] = []
        self._tick_row: List[int] = []
        self._inflight: List[int] = []
        self.in_flight = 0
        self.cur_k = 0

    # -------------------------------------------------------------- clocks

    def hw(self, v: Node, t: float) -> float:
        if v == VIRTUAL:
            return self.params.zeta * t
        return self.sc.rates[v].value(t)

    def logical(self, v: Node, t: float) -> float:
        if v == VIRTUAL:
            return self.params.zeta * t + self.v0_offset
        return logical_value(self.states[v].clock, self.hw(v, t), self.params.mu)

    # -------------------------------------------------------------- events

    def push(self, t: float, prio: int, node: Node, kind: str, data=None) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, prio, node, self.seq, kind, data))

    def _sample(self, t: float, kind: int) -> int:
        row_L, row_H, row_F = [], [], []
        for v in self.nodes:
            H = self.hw(v, t)
            row_H.append(H)
            if v == VIRTUAL:
                row_L.append(self.params.zeta * t + self.v0_offset)
                row_F.append(False)
            else:
                st = self.states[v]
                row_L.append(logical_value(st.clock, H, self.params.mu))
                row_F.append(st.clock.mode == FAST)
        if (self._t and self._t[-1] == t and kind in (S_TICK, S_HW)
                and self._K[-1] in (S_TICK, S_HW, S_POST)):
            # same instant, no jump in between: refresh the last row in place
            self._L[-1], self._H[-1], self._F[-1] = row_L, row_H, row_F
            if self._K[-1] != S_POST:
                self._K[-1] = kind
            return len(self._t) - 1
        self._t.append(t)
        self._L.append(row_L)
        self._H.append(row_H)
        self._F.append(row_F)
        self._K.append(kind)
        self._inflight.append(self.in_flight)
        return len(self._t) - 1

    def _step(self, v: Node, t: float, inp: StepInput) -> None:
        st = self.states[v]
        before_parent = st.tree.parent
        new, msgs, fx = computational_step(st, inp, self.ctx[v], self.params)
        jumped = fx.reset_applied is not None
        if jumped:
            # L is about to jump: close the linear piece first
            self._sample(t, S_PRE)
            self.events.append({"kind": "reset", "t": t, "node": v, "shift": fx.reset_applied})
        self.states[v] = new
        if fx.captured:
            self.events.append({"kind": "capture", "t": t, "node": v, "round": new.snap.round_id,
                                "offsets": dict(new.snap.captured or {})})
        if fx.decision is not None:
            self.events.append(dict(fx.decision, kind="decision", t=t, node=v))
        if new.tree.parent != before_parent:
            self.events.append({"kind": "parent", "t": t, "node": v, "parent": new.tree.parent})
        for m in msgs:
            self._send(m, t)
        if jumped:
            # re-measure the arcs touching v so held estimates stay fresh
            self._refresh(t, self.cur_k, S_POST, around=v)

    def _refresh(self, t: float, k: int, kind: int, around: Optional[Node] = None) -> None:
        """Re-measure offsets (all arcs, or those touching ``around``) and step the owners."""
        Ls = {v: self.logical(v, t) for v in self.nodes}
        err = self.sc.errors
        if around is None:
            owners = self.real
        else:
            owners = [around] + [w for w in self.ctx[around].neighbors if w != VIRTUAL]
        for x in owners:
            offs = dict(self.states[x].offsets)
            for w in self.ctx[x].neighbors:
                if around is None or x == around or w == around:
                    offs[w] = Ls[x] - Ls[w] - err.at_index((x, w), k)
            self._step(x, t, StepInput(self.hw(x, t), offs))
        idx = self._sample(t, kind)
        self._tick_t.append(t)
        self._tick_k.append(k)
        self._tick_o.append([self.states[v].offsets.get(w, math.nan) for (v, w) in self.arcs])
        self._tick_row.append(idx)

    def _send(self, m: Message, t: float) -> None:
        if m.dst == VIRTUAL:
            return
        if m.dst not in self.ctx[m.src].delay:
            raise SimulationError(f"message {m.kind} from {m.src} to non-neighbor {m.dst}")
        d = self.ctx[m.src].delay[m.dst]
        if self.sc.delay_law == "fixed":
            lat = d
        else:
            u = float(self.delay_rng.random())
            lat = d - u * (1.0 - self.sc.min_delay_frac) * d
        self.n_messages += 1
        self.in_flight += 1
        self.push(t + lat, P_DELIVER, m.dst, "deliver", (replace(m, send_time=t), d))

    def _tick(self, t: float, k: int) -> None:
        self.cur_k = k
        self._refresh(t, k, S_TICK)

    def _fault(self, t: float, spec: FaultSpec) -> None:
        rng = rng_for(spec.seed, "fault", t)
        self._sample(t, S_PRE)
        nb = self.topo.neighbors()
        scale = max(1.0, delay_diameter_real(self.topo))
        for v in self.real:
            L = self.logical(v, t) + (float(rng.uniform(0, spec.spread)) if spec.spread else 0.0)
            H = self.hw(v, t)
            st = self.states[v]
            if spec.garbage or spec.tree_only:
                g = _garbage_state(v, self.topo, nb[v], L, rng, spec.tree_only, scale)
                st = replace(g, clock=LogicalClockState(L, H, g.clock.mode), offsets=st.offsets,
                             root=(g.root if g.root is None else replace(
                                 g.root, start_H=H, next_round_H=H + g.root.next_round_H)))
            else:
                st = replace(st, clock=LogicalClockState(L, H, st.clock.mode))
            self.states[v] = st
        self.events.append({"kind": "fault", "t": t, "spread": spec.spread, "garbage": spec.garbage})
        self._refresh(t, self.cur_k, S_POST)

    # ----------------------------------------------------------------- run

    def run(self) -> Trace:
        sc = self.sc
        end = sc.duration
        step = sc.est_step
        if sc.errors.horizon + 1e-9 < end:
            raise ValueError("error trace shorter than the run")
        n_ticks = int(math.floor(end / step + 1e-9)) + 1
        self.push(0.0, P_TICK, -10, "tick", 0)
        for v in self.real:
            sched = sc.rates[v]
            for b in sched.breakpoints[1:]:
                if b <= end:
                    self.push(b, P_HW, v, "hw")
        if self.params.stabilize:
            for v in self.real:
                for w in self.ctx[v].neighbors:
                    if w != VIRTUAL:
                        self.push(0.0, P_TIMER, v, "tree", w)
            root = self.topo.root
            self.push(0.0, P_TIMER, root, "check")
            # initial root timestamps are relative to its hardware clock at 0
        for f in sc.faults:
            if f.at > 0:
                self.push(f.at, P_FAULT, -5, "fault", f)
        while self.heap:
            t, prio, node, _, kind, data = heapq.heappop(self.heap)
            if t > end + 1e-12:
                break
            self.n_events += 1
            if self.n_events > self.max_events:
                raise SimulationError("event budget exhausted (event storm?)")
            if kind == "tick":
                self._tick(t, data)
                if data + 1 < n_ticks:
                    self.push((data + 1) * step, P_TICK, -10, "tick", data + 1)
            elif kind == "deliver":
                m, d = data
                if not (m.send_time < t <= m.send_time + d + 1e-9):
                    raise SimulationError(f"delivery outside (send, send+d] for {m}")
                self.in_flight -= 1
                self._step(node, t, StepInput(self.hw(node, t), None, [m]))
            elif kind == "tree":
                self._step(node, t, StepInput(self.hw(node, t), None, (), ("tree", data)))
                H_next = self.hw(node, t) + self.ctx[node].delay[data]
                self.push(sc.rates[node].inverse(H_next), P_TIMER, node, "tree", data)
            elif kind == "check":
                self._step(node, t, StepInput(self.hw(node, t), None, (), ("check",)))
                H_next = self.hw(node, t) + self.params.check_period
                self.push(sc.rates[node].inverse(H_next), P_TIMER, node, "check")
            elif kind == "hw":
                self._sample(t, S_HW)
            elif kind == "fault":
                self._fault(t, data)
        if not self._t or self._t[-1] < end:
            self._sample(end, S_HW)
        tr = Trace(
            sc, self.nodes, np.array(self._t), np.array(self._L), np.array(self._H),
            np.array(self._F, dtype=bool), np.array(self._K, dtype=np.int8), list(self.arcs),
            np.array(self._tick_t), np.array(self._tick_k, dtype=np.int64),
            np.array(self._tick_o).reshape(len(self._tick_t), len(self.arcs)),
            np.array(self._tick_row, dtype=np.int64), self.events, self.n_messages, self.n_events,
            dict(self.states), np.array(self._inflight, dtype=np.int64))
        log.info("simulated %s: %d samples, %d messages, %d events", sc.name, len(tr.t),
                 tr.n_messages, tr.n_events)
        return tr


def simulate(sc: Scenario, max_events: int = 50_000_000) -> Trace:
    return Simulator(sc, max_events).run()


def inject_fault(sc: Scenario, spec: FaultSpec) -> Scenario:
    """Schedule a transient fault (clock scatter and/or scrambled state) at spec.at."""
    if spec.spread == 0 and not (spec.garbage or spec.tree_only):
        return sc
    if spec.at <= 0:
        return corrupt_initial_state(sc, spec)
    return replace(sc, faults=list(sc.faults) + [spec])
