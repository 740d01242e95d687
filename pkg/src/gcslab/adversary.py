"""Inputs an adversary may legally choose: estimate errors, hardware rates,
initial states, plus the named scenarios used by the experiments."""
from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .clocks import FAST, SLOW, LogicalClockState, RateSchedule
from .protocol import NodeState, ProtocolParams, RootState, SnapshotState, TreeState
from .topology import (VIRTUAL, Arc, Node, Topology, cycle, delay_diameter, edge_key, grid, line,
                       with_virtual)


def rng_for(seed: int, *stream) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream labels)."""
    h = hashlib.sha256(repr((int(seed),) + tuple(stream)).encode()).digest()
    key = int.from_bytes(h[:16], "big")
    return np.random.Generator(np.random.Philox(key=key))


# ------------------------------------------------------------ error traces


class ErrorTrace:
    """Piecewise-constant e_{v,w}(t) on a uniform grid of breakpoints k * step."""

    def __init__(self, step: float, values: Mapping[Arc, Sequence[float]], T: float,
                 delta: Mapping[Arc, float]):
        self.step = float(step)
        self.values = {a: np.asarray(v, dtype=float) for a, v in values.items()}
        self.T = float(T)
        self.delta = dict(delta)
        lens = {len(v) for v in self.values.values()}
        self.length = lens.pop() if lens else 0

    @property
    def horizon(self) -> float:
        return self.step * max(self.length - 1, 0)

    def index(self, t: float) -> int:
        k = int(math.floor(t / self.step + 1e-9))
        return min(max(k, 0), self.length - 1)

    def value(self, arc: Arc, t: float) -> float:
        return float(self.values[arc][self.index(t)])

    def at_index(self, arc: Arc, k: int) -> float:
        return float(self.values[arc][min(k, self.length - 1)])

    def arcs(self) -> List[Arc]:
        return sorted(self.values)


@dataclass(frozen=True)
class TraceViolation:
    arc: Arc
    kind: str  # "drift" or "antisymmetry"
    window_start: int
    amount: float


def _window_extremes(values: np.ndarray, lengths: int):
    """Sliding max/min over windows [i, i + lengths) using monotone deques."""
    n = len(values)
    mx, mn = np.empty(n), np.empty(n)
    dq_max: deque = deque()
    dq_min: deque = deque()
    j = 0
    for i in range(n):
        end = min(n, i + lengths)
        while j < end:
            while dq_max and values[dq_max[-1]] <= values[j]:
                dq_max.pop()
            dq_max.append(j)
            while dq_min and values[dq_min[-1]] >= values[j]:
                dq_min.pop()
            dq_min.append(j)
            j += 1
        while dq_max[0] < i:
            dq_max.popleft()
        while dq_min[0] < i:
            dq_min.popleft()
        mx[i] = values[dq_max[0]]
        mn[i] = values[dq_min[0]]
    return mx, mn


def validate_error_trace(tr: ErrorTrace) -> List[TraceViolation]:
    """Check both window inequalities for every window of length T.

    A window that ends just short of the start of segment j and starts inside
    segment i sees segments i..j-1 with k*step < (i+1)*step + T, so the number of
    segments per window is ceil(T/step)+1 (all of them when T is infinite).
    """
    out: List[TraceViolation] = []
    if tr.length == 0:
        return out
    if math.isinf(tr.T):
        span = tr.length
    else:
        span = int(math.ceil(tr.T / tr.step - 1e-9)) + 1
    done = set()
    for (v, w) in tr.arcs():
        if (v, w) in done:
            continue
        done.add((v, w))
        done.add((w, v))
        d = tr.delta[(v, w)]
        a = tr.values[(v, w)]
        b = tr.values.get((w, v))
        amx, amn = _window_extremes(a, span)
        bad = np.nonzero(amx - amn >= d)[0]
        if len(bad):
            out.append(TraceViolation((v, w), "drift", int(bad[0]), float((amx - amn)[bad[0]])))
        if b is None:
            continue
        bmx, bmn = _window_extremes(b, span)
        bad = np.nonzero(bmx - bmn >= d)[0]
        if len(bad):
            out.append(TraceViolation((w, v), "drift", int(bad[0]), float((bmx - bmn)[bad[0]])))
        hi = amx + bmx
        lo = amn + bmn
        bad = np.nonzero((hi >= d) | (lo <= -d))[0]
        if len(bad):
            k = int(bad[0])
            out.append(TraceViolation((v, w), "antisymmetry", k, float(max(hi[k], -lo[k]))))
    return out


def generate_error_trace(t: Topology, seed: int, horizon: float, T: float,
                         bias_map: Optional[Mapping[Arc, float]] = None, step: float = 0.5,
                         drift_frac: float = 0.4, jitter_frac: float = 0.4,
                         walk_frac: float = 0.05) -> ErrorTrace:
    """e_{v,w} = bias + drift, e_{w,v} = -bias - drift + jitter.

    The drift is a clamped random walk confined to a band of width
    ``drift_frac * delta`` and the jitter is i.i.d. in a band of width
    ``jitter_frac * delta``; with both fractions below 1/2 every window of any
    length satisfies both window inequalities.
    """
    if drift_frac >= 0.5 or jitter_frac >= 0.5:
        raise ValueError("drift and jitter bands must each be narrower than delta/2")
    bias_map = dict(bias_map or {})
    n = int(math.ceil(horizon / step)) + 1
    if math.isinf(T):
        drift_frac = jitter_frac = 0.0
    values: Dict[Arc, np.ndarray] = {}
    delta: Dict[Arc, float] = {}
    for (u, v) in t.edges:
        d = t.delta_of(u, v)
        b = bias_map.get((u, v))
        if b is None:
            b = -bias_map.get((v, u), 0.0)
        if (v, u) in bias_map and abs(bias_map[(v, u)] + b) > 1e-12:
            raise ValueError(f"bias map not antisymmetric on {(u, v)}")
        half = 0.5 * drift_frac * d
        rng = rng_for(seed, "err", u, v)
        if half > 0:
            steps = rng.uniform(-walk_frac * d, walk_frac * d, size=n)
            walk = np.empty(n)
            x = rng.uniform(-half, half)
            for k in range(n):
                x = min(half, max(-half, x + steps[k]))
                walk[k] = x
        else:
            walk = np.zeros(n)
        jh = 0.5 * jitter_frac * d
        jitter = rng.uniform(-jh, jh, size=n) if jh > 0 else np.zeros(n)
        values[(u, v)] = b + walk
        values[(v, u)] = -b - walk + jitter
        delta[(u, v)] = delta[(v, u)] = d
    return ErrorTrace(step, values, T, delta)


# ---------------------------------------------------------- rate schedules


def generate_rate_schedule(theta: float, seed: int, horizon: float, law: str = "constant",
                           period: float = 10.0, node: Node = 0) -> RateSchedule:
    if theta < 1:
        raise ValueError("theta must be >= 1")
    if law == "constant":
        return RateSchedule([0.0], [(1.0 + theta) / 2.0], horizon, hi=theta)
    n = max(1, int(math.ceil(horizon / period)))
    bps = [k * period for k in range(n)]
    if law == "square-wave":
        phase = int(rng_for(seed, "sq", node).integers(0, 2))
        rates = [theta if (k + phase) % 2 else 1.0 for k in range(n)]
        return RateSchedule(bps, rates, horizon, hi=theta)
    if law == "random-walk":
        rng = rng_for(seed, "rw", node)
        x = rng.uniform(1.0, theta)
        rates = []
        for _ in range(n):
            x = min(theta, max(1.0, x + rng.normal(0.0, 0.2 * (theta - 1.0))))
            rates.append(x)
        return RateSchedule(bps, rates, horizon, hi=theta)
    if law == "extreme":
        # random choice between the two extremes per period
        rng = rng_for(seed, "ex", node)
        rates = [theta if rng.random() < 0.5 else 1.0 for _ in range(n)]
        return RateSchedule(bps, rates, horizon, hi=theta)
    raise ValueError(f"unknown rate law {law!r}")


# --------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class FaultSpec:
    at: float = 0.0
    spread: float = 0.0          # initial / injected logical clock scatter
    garbage: bool = False        # randomize tree/snapshot variables
    tree_only: bool = False      # only corrupt parents and distance variables
    seed: int = 0


@dataclass
class Scenario:
    name: str
    topology: Topology
    params: ProtocolParams
    errors: ErrorTrace
    rates: Dict[Node, RateSchedule]
    duration: float
    seed: int = 0
    initial_L: Dict[Node, float] = field(default_factory=dict)
    initial_states: Optional[Dict[Node, NodeState]] = None
    est_step: float = 0.5
    delay_law: str = "uniform"
    min_delay_frac: float = 0.5
    faults: List[FaultSpec] = field(default_factory=list)
    in_spec: bool = True
    meta: Dict[str, object] = field(default_factory=dict)

    def hypotheses(self) -> List[str]:
        """Parameter hypotheses of the convergence results that fail."""
        p = self.params
        bad = list(p.check())
        if p.sigma < 2:
            bad.append(f"sigma={p.sigma:.4g} < 2")
        return bad


def estimate_step(t: Topology, params: ProtocolParams, budget: float = 0.1) -> float:
    """Sampling period keeping the hold error (beta-alpha)*step below budget*delta."""
    dmin = min(t.delta[e] for e in t.edges)
    lmin = min(t.delay[e] for e in t.real_edges()) if t.real_edges() else 1.0
    spread = params.beta - params.alpha
    step = budget * dmin / spread if spread > 0 else lmin
    step = min(step, lmin / 2.0)
    # snap to a binary-friendly grid value
    return 2.0 ** math.floor(math.log2(step))


def _schedules(t: Topology, params: ProtocolParams, seed: int, horizon: float, law: str,
               period: float) -> Dict[Node, RateSchedule]:
    out = {}
    real = sorted(t.real_nodes())
    for i, v in enumerate(real):
        if law == "split":
            # first half of the nodes run fastest, the rest slowest, forever
            r = params.theta if 2 * i < len(real) else 1.0
            out[v] = RateSchedule([0.0], [r], horizon, hi=params.theta)
        else:
            out[v] = generate_rate_schedule(params.theta, seed, horizon, law, period, node=v)
    return out


def scenario_uniform(shape: str, D: int, Delta: float, delta: float, params: ProtocolParams,
                     seed: int = 0, duration: Optional[float] = None, delay: float = 0.5,
                     rate_law: str = "random-walk", rate_period: float = 25.0, c: float = 1.0,
                     T: Optional[float] = None) -> Scenario:
    if Delta < delta or delta <= 0:
        raise ValueError("need Delta >= delta > 0")
    if shape == "line":
        topo = line(D + 1, delta, delay, c)
    elif shape == "cycle":
        topo = cycle(2 * D, delta, delay, c)
    elif shape == "grid":
        side = max(1, D // 2 + 1)
        topo = grid(side, side, delta, delay, c)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    rng = rng_for(seed, "bias")
    span = Delta - delta
    bias = {}
    for (u, v) in topo.edges:
        bias[(u, v)] = float(rng.uniform(-span, span)) if span > 0 else 0.0
    horizon = duration if duration is not None else 100.0
    step = estimate_step(topo, params)
    win = params.T if T is None else T
    errs = generate_error_trace(topo, seed, horizon + step, win, bias, step=step)
    rates = _schedules(topo, params, seed, horizon + 1, rate_law, rate_period)
    sc = Scenario(f"uniform-{shape}-d{D}", topo, params, errs, rates, horizon, seed,
                  {v: 0.0 for v in topo.nodes}, est_step=step,
                  meta={"shape": shape, "D": D, "Delta": Delta, "delta": delta, "bias": bias})
    sc.in_spec = not sc.hypotheses()
    return sc


def scenario_cycle_asymmetric(n: int, f: float, delta: float, params: ProtocolParams,
                              seed: int = 0, duration: float = 200.0, delay: float = 0.1,
                              rate_law: str = "random-walk") -> Scenario:
    """n-cycle, one edge biased by +f/-f, clocks set so every observed skew is f/n."""
    if n < 3 or f < 0:
        raise ValueError("need n >= 3 and f >= 0")
    topo = cycle(n, delta, delay)
    # the biased edge is {n-1, 0}; e_{n-1,0} = f
    bias = {(n - 1, 0): float(f)}
    step = estimate_step(topo, params, budget=0.5)
    errs = generate_error_trace(topo, seed, duration + step, math.inf, bias, step=step)
    # o_{i,i+1} = L_i - L_{i+1} - e_{i,i+1} = -f/n  on every arc of the cycle order
    init = {i: i * f / n for i in range(n)}
    rates = _schedules(topo, params, seed, duration + 1, rate_law, 25.0)
    sc = Scenario(f"cycle-asym-n{n}", topo, params, errs, rates, duration, seed, init,
                  est_step=step, meta={"n": n, "f": f, "delta": delta, "biased_edge": (n - 1, 0),
                                       "bias": bias})
    sc.in_spec = not sc.hypotheses()
    return sc


def _garbage_state(v: Node, topo: Topology, nb: Sequence[Node], L: float, rng,
                   tree_only: bool, scale: float) -> NodeState:
    real_nb = [w for w in nb if w != VIRTUAL]
    dist = {w: topo.delay_of(v, w) + float(rng.uniform(0, scale)) for w in real_nb}
    parent = real_nb[int(rng.integers(0, len(real_nb)))] if real_nb else None
    claims = {w: (bool(rng.integers(0, 2)), float(rng.uniform(0, scale))) for w in real_nb}
    tree = TreeState(dist, parent, claims)
    if tree_only:
        return NodeState(v, LogicalClockState(L, 0.0, SLOW), tree=tree)
    mode = FAST if rng.integers(0, 2) else SLOW
    captured = {w: float(rng.normal(0, scale)) for w in nb} if rng.integers(0, 2) else None
    snap = SnapshotState(round_id=int(rng.integers(0, 1000)), depth=float(rng.uniform(0, scale)),
                         captured=captured, capture_H=0.0,
                         report_sent=bool(rng.integers(0, 2)), reset_done=bool(rng.integers(0, 2)))
    root = None
    if v == topo.root:
        root = RootState(phase=["idle", "init", "capture"][int(rng.integers(0, 3))],
                         round_id=int(rng.integers(0, 1000)), start_H=0.0,
                         next_round_H=float(rng.uniform(0, 10 * scale)), window=float(rng.uniform(1, scale + 1)),
                         w_ref=float(rng.uniform(0, scale)))
    return NodeState(v, LogicalClockState(L, 0.0, mode), tree=tree, snap=snap, root=root)


def corrupt_initial_state(sc: Scenario, spec: FaultSpec) -> Scenario:
    """Scatter initial clocks by up to ``spec.spread`` and optionally scramble protocol state."""
    rng = rng_for(spec.seed, "corrupt")
    topo = sc.topology
    nb = topo.neighbors()
    L = dict(sc.initial_L)
    for v in topo.real_nodes():
        if spec.spread > 0:
            L[v] = L.get(v, 0.0) + float(rng.uniform(0, spec.spread))
    states = None
    if spec.garbage or spec.tree_only:
        scale = max(1.0, delay_diameter_real(topo))
        states = {v: _garbage_state(v, topo, nb[v], L.get(v, 0.0), rng, spec.tree_only, scale)
                  for v in topo.real_nodes()}
    return replace(sc, initial_L=L, initial_states=states,
                   meta=dict(sc.meta, corruption={"spread": spec.spread, "garbage": spec.garbage,
                                                  "tree_only": spec.tree_only, "seed": spec.seed}))


def delay_diameter_real(topo: Topology) -> float:
    if topo.virtual is None:
        return delay_diameter(topo)
    sub = Topology(topo.real_nodes(), topo.real_edges(), {e: topo.delta[e] for e in topo.real_edges()},
                   {e: topo.delay[e] for e in topo.real_edges()}, topo.root, topo.refs, topo.c)
    return delay_diameter(sub)


def with_virtual_reference(sc: Scenario, zeta: float, ref_delta: Optional[float] = None,
                           ref_bias: float = 0.0) -> Scenario:
    """Add v0 (logical clock zeta * t in the simulated frame) joined to every node of R."""
    topo = sc.topology
    if not topo.refs:
        raise ValueError("reference set R is empty")
    params = replace(sc.params, zeta=zeta)
    problems = params.check()
    if problems:
        raise ValueError("; ".join(problems))
    rd = {v: (ref_delta if ref_delta is not None else min(topo.delta.values())) for v in topo.refs}
    lmin = min(topo.delay.values())
    h = with_virtual(topo, rd, lmin)
    bias = dict(sc.meta.get("bias", {}))
    for v in sorted(topo.refs):
        bias[(v, VIRTUAL)] = ref_bias
    errs = generate_error_trace(h, sc.seed, sc.errors.horizon, sc.errors.T, bias, step=sc.errors.step)
    # reference arcs: e_{v0,v} is fixed to -e_{v,v0} (v0 takes no measurements)
    vals = dict(errs.values)
    for v in sorted(topo.refs):
        vals[(VIRTUAL, v)] = -vals[(v, VIRTUAL)]
    errs = ErrorTrace(errs.step, vals, errs.T, errs.delta)
    init = dict(sc.initial_L)
    init[VIRTUAL] = 0.0
    out = replace(sc, name=sc.name + "-ext", topology=h, params=params, errors=errs,
                  initial_L=init, meta=dict(sc.meta, zeta=zeta, refs=sorted(topo.refs), bias=bias))
    out.in_spec = not out.hypotheses()
    return out


def scenario_external(D: int, Delta: float, delta: float, params: ProtocolParams, zeta: float,
                      refs: Sequence[Node] = (0,), seed: int = 0, duration: float = 100.0,
                      delay: float = 0.5, rate_law: str = "random-walk", spread: float = 0.0,
                      T: Optional[float] = None) -> Scenario:
    base = scenario_uniform("line", D, Delta, delta, replace(params, zeta=zeta), seed, duration,
                            delay, rate_law, T=duration if T is None else T)
    topo = replace(base.topology, refs=frozenset(refs))
    base = replace(base, topology=topo)
    if spread:
        rng = rng_for(seed, "ext-spread")
        base.initial_L = {v: float(rng.uniform(0, spread)) for v in topo.nodes}
    return with_virtual_reference(base, zeta)
