"""Ground truth the nodes cannot see: nominal offsets, the slow/fast conditions,
level potentials, skews, an independent estimate oracle and the trace verifier."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .adversary import ErrorTrace
from .topology import (VIRTUAL, Arc, Node, Topology, all_pairs_distances, build_level_graph,
                       compute_s0, delay_diameter, edge_key, max_path_delta, shortest_path_tree)

EPS_NUM = 1e-9


# --------------------------------------------------------- nominal offsets


def nominal_offsets(errors: ErrorTrace, a: float, T: float) -> Dict[Arc, float]:
    """O_{v,w} = (e_{v,w}(mid) - e_{w,v}(mid)) / 2 with mid the window midpoint."""
    mid = a + T / 2.0 if math.isfinite(T) else a
    mid = min(max(mid, 0.0), errors.horizon)
    out: Dict[Arc, float] = {}
    for (v, w) in errors.arcs():
        if (v, w) in out:
            continue
        o = (errors.value((v, w), mid) - errors.value((w, v), mid)) / 2.0
        out[(v, w)] = o
        out[(w, v)] = -o
    return out


# --------------------------------------------------------------- conditions


def slow_condition_range(x: Sequence[float], d: Sequence[float]) -> Tuple[float, float]:
    """Levels s meeting each half of the slow condition; x_i = L_v - L_w - O."""
    lo, hi = 0, -math.inf
    for xi, di in zip(x, d):
        lo = max(lo, math.ceil(-xi / (4.0 * di)))   # all: x >= -4s delta
        g = math.floor(xi / (4.0 * di))              # some: x >= 4s delta
        if g >= 0:
            hi = max(hi, g)
    return lo, hi


def fast_condition_range(x: Sequence[float], d: Sequence[float]) -> Tuple[float, float]:
    lo, hi = 0, -math.inf
    for xi, di in zip(x, d):
        lo = max(lo, math.ceil((xi / di - 2.0) / 4.0))   # all: x <= (4s+2) delta
        g = math.floor((-xi / di - 2.0) / 4.0)            # some: x <= -(4s+2) delta
        if g >= 0:
            hi = max(hi, g)
    return lo, hi


def eval_slow_condition(x: Sequence[float], d: Sequence[float]) -> bool:
    if len(x) == 0:
        return False
    lo, hi = slow_condition_range(x, d)
    return lo <= hi


def eval_fast_condition(x: Sequence[float], d: Sequence[float]) -> bool:
    if len(x) == 0:
        return False
    lo, hi = fast_condition_range(x, d)
    return lo <= hi


def _vec_range(lo_terms: np.ndarray, hi_terms: np.ndarray) -> np.ndarray:
    lo = np.maximum(0.0, lo_terms.max(axis=1))
    hi_terms = np.where(hi_terms >= 0, hi_terms, -np.inf)
    return hi_terms.max(axis=1) >= lo


def slow_condition_vec(X: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Rows of X are per-edge values L_v - L_w - O for one node."""
    return _vec_range(np.ceil(-X / (4.0 * d)), np.floor(X / (4.0 * d)))


def fast_condition_vec(X: np.ndarray, d: np.ndarray) -> np.ndarray:
    return _vec_range(np.ceil((X / d - 2.0) / 4.0), np.floor((-X / d - 2.0) / 4.0))


def slow_trigger_vec(o: np.ndarray, d: np.ndarray) -> np.ndarray:
    r = o / d
    return _vec_range(np.floor((-r - 1.0) / 4.0) + 1.0, np.ceil((r + 1.0) / 4.0) - 1.0)


def fast_trigger_vec(o: np.ndarray, d: np.ndarray) -> np.ndarray:
    r = o / d
    return _vec_range(np.floor((r - 3.0) / 4.0) + 1.0, np.ceil((-r - 1.0) / 4.0) - 1.0)


# ----------------------------------------------------------------- potentials


def potential(L: np.ndarray, D: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-node potential max_w (L_w - L_v - d(v,w)) and its maximum.

    ``L`` is one snapshot (n,) or a stack of snapshots (N, n).
    """
    L = np.asarray(L, dtype=float)
    single = L.ndim == 1
    if single:
        L = L[None, :]
    out = np.empty_like(L)
    step = max(1, 2_000_000 // max(1, L.shape[1] ** 2))
    for i in range(0, L.shape[0], step):
        blk = L[i:i + step]
        out[i:i + step] = (blk[:, None, :] - D[None, :, :]).max(axis=2) - blk
    tot = out.max(axis=1)
    if single:
        return out[0], tot[0]
    return out, tot


def skew_metrics(L: Mapping[Node, float], edges: Iterable[Tuple[Node, Node]],
                 reference: Optional[Node] = None) -> dict:
    vals = list(L.values())
    local = {e: abs(L[e[0]] - L[e[1]]) for e in edges}
    out = {"G": max(vals) - min(vals) if vals else 0.0, "local": local,
           "L": max(local.values()) if local else 0.0}
    if reference is not None:
        out["T"] = max(abs(x - L[reference]) for v, x in L.items() if v != reference)
    return out


class Levels:
    """Distance matrices of the level graphs for a fixed set of nominal offsets."""

    def __init__(self, topo: Topology, O: Mapping[Arc, float], nodes: Sequence[Node]):
        self.topo = topo
        self.O = dict(O)
        self.nodes = list(nodes)
        self.s0 = compute_s0(topo, O)
        self._cache: Dict[int, np.ndarray] = {}

    def dist(self, s: float) -> np.ndarray:
        q = int(round(4 * s))
        if abs(q - 4 * s) > 1e-9:
            raise ValueError("levels must be multiples of 1/4")
        if q not in self._cache:
            m = all_pairs_distances(build_level_graph(self.topo, self.O, q))
            D = np.array([[m(v, w) for w in self.nodes] for v in self.nodes])
            self._cache[q] = D
        return self._cache[q]

    def W(self, s: float) -> float:
        return float(self.dist(s).max())


# ------------------------------------------------------------ estimate oracle


def _floyd(Wm: np.ndarray) -> np.ndarray:
    D = Wm.copy()
    n = D.shape[0]
    np.fill_diagonal(D, np.minimum(np.diag(D), 0.0))
    for k in range(n):
        D = np.minimum(D, D[:, k:k + 1] + D[k:k + 1, :])
    return D


@dataclass
class OracleEstimate:
    nodes: List[Node]
    s0_tilde: int
    level: float
    psi: float
    w_delta: float
    neg_dist: np.ndarray   # -d(v, w)

    def offset(self, v: Node, w: Node) -> float:
        """Midpoint estimate of L_v - L_w from the two one-sided bounds."""
        i, j = self.nodes.index(v), self.nodes.index(w)
        return (self.neg_dist[i, j] - self.neg_dist[j, i]) / 2.0


def _oracle(captured: Mapping[Arc, float], delta: Mapping, c: float) -> OracleEstimate:
    caps = dict(captured)
    for (v, w), o in list(caps.items()):
        if w == VIRTUAL and (w, v) not in caps:
            caps[(w, v)] = -o
    nodes = sorted({x for a in caps for x in a})
    idx = {v: i for i, v in enumerate(nodes)}
    n = len(nodes)
    om = np.full((n, n), np.nan)
    dl = np.full((n, n), np.inf)
    for (v, w), o in caps.items():
        if (w, v) not in caps:
            raise ValueError(f"missing capture for {(w, v)}")
        om[idx[v], idx[w]] = (o - caps[(w, v)]) / 2.0
        d = delta[edge_key(v, w)] if edge_key(v, w) in delta else delta[(v, w)]
        dl[idx[v], idx[w]] = d
    arc = np.isfinite(dl)

    def dist(q):
        Wm = np.where(arc, q * np.where(arc, dl, 0.0) - np.nan_to_num(om), np.inf)
        return _floyd(Wm)

    s = 0
    while (np.diag(dist(4 * s)) < -EPS_NUM).any():
        s += 1
        if s > 10 ** 6:
            raise ValueError("no level without negative cycles")
    q = 4 * s + int(round(4 * c)) + 8
    D = dist(q)
    if (np.diag(D) < -EPS_NUM).any():
        raise ValueError("negative cycle at the adjusted level")
    Dd = _floyd(np.where(arc, dl, np.inf))
    if not np.isfinite(Dd).all():
        raise ValueError("captured graph is disconnected")
    w_delta = float(Dd.max())
    return OracleEstimate(nodes, s, q / 4.0, 2.0 * w_delta + float((-D).max()), w_delta, -D)


def estimate_psi_oracle(captured: Mapping[Arc, float], delta: Mapping, c: float = 1.0) -> Tuple[int, float]:
    est = _oracle(captured, delta, c)
    return est.s0_tilde, est.psi


def estimate_clock_offsets_oracle(captured: Mapping[Arc, float], delta: Mapping,
                                  c: float = 1.0) -> Dict[Arc, float]:
    """Estimates of L_v(t_r) - L_w(t_r) for every ordered pair.

    Feeding hardware-clock captures instead of logical-clock captures gives the
    hardware variant unchanged.
    """
    est = _oracle(captured, delta, c)
    return {(v, w): est.offset(v, w) for v in est.nodes for w in est.nodes}


# ----------------------------------------------------------------- reports


@dataclass
class Check:
    name: str
    what: str
    status: str            # pass, fail, skipped, measured
    lhs: Optional[float] = None
    rhs: Optional[float] = None
    margin: Optional[float] = None
    count: int = 0
    witness: Optional[dict] = None
    note: str = ""

    @property
    def hard(self) -> bool:
        return self.status in ("pass", "fail")


@dataclass
class BoundReport:
    scenario: str
    window: Tuple[float, float]
    checks: List[Check] = field(default_factory=list)
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    def failures(self) -> List[Check]:
        return [c for c in self.checks if c.status == "fail"]

    def get(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def names(self) -> List[str]:
        return [c.name for c in self.checks]

    def to_dict(self) -> dict:
        def clean(x):
            if isinstance(x, float):
                return x if math.isfinite(x) else repr(x)
            if isinstance(x, dict):
                return {str(k): clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            if isinstance(x, (np.floating, np.integer)):
                return clean(x.item())
            return x
        return clean({"scenario": self.scenario, "window": list(self.window), "passed": self.passed,
                      "checks": [asdict(c) for c in self.checks], "meta": self.meta})


def _bound_check(name: str, what: str, lhs: np.ndarray, rhs, times: np.ndarray,
                 labels=None, tol: float = 0.0, strict: bool = False) -> Check:
    """lhs <= rhs (+tol) elementwise; lhs has shape (N,) or (N, k)."""
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.broadcast_to(np.asarray(rhs, dtype=float), lhs.shape)
    if lhs.size == 0:
        return Check(name, what, "skipped", note="no samples in range")
    margin = rhs - lhs
    if strict:
        bad = margin <= 0
    else:
        bad = margin < -tol
    flat = int(np.argmin(margin))
    pos = np.unravel_index(flat, margin.shape)
    wit = {"t": float(times[pos[0]])}
    if labels is not None and len(pos) > 1:
        wit["where"] = labels[pos[1]]
    return Check(name, what, "fail" if bad.any() else "pass", float(lhs[pos]), float(rhs[pos]),
                 float(margin[pos]), int(lhs.size), wit)


# ------------------------------------------------------------------ verifier

CHECK_NAMES = ("error_window", "rate_upper", "rate_lower", "hardware_rate", "mode_matches_trigger",
               "trigger_exclusion", "slow_condition_implies_trigger", "fast_condition_implies_trigger",
               "level_monotone", "global_vs_potential", "local_bound", "waitup", "catchup", "convergence")


@dataclass
class VerifyOptions:
    levels: int = 3               # levels above s0+1 that are checked
    epsilon: float = 1.0
    mutation: str = ""            # "drop-O" ignores nominal offsets in the conditions
    expect_reset: Optional[bool] = None
    reset_K: float = 5.0
    stab_multiple: float = 4.0
    stab_level_offset: int = 1    # analysis level tilde s0 = s0 + offset


def _interp_row(tr, t: float) -> np.ndarray:
    """Clock values at time t (latest value if t is a jump instant)."""
    j = int(np.searchsorted(tr.t, t, side="right")) - 1
    j = max(j, 0)
    if tr.t[j] == t or j + 1 >= len(tr.t):
        return tr.L[j].copy()
    t0, t1 = tr.t[j], tr.t[j + 1]
    f = (t - t0) / (t1 - t0)
    return tr.L[j] + f * (tr.L[j + 1] - tr.L[j])


def verify_trace(tr, window: Optional[Tuple[float, float]] = None,
                 options: Optional[VerifyOptions] = None) -> BoundReport:
    """Evaluate every bound on a trace; failures carry the worst sample as witness."""
    opt = options or VerifyOptions()
    sc = tr.scenario
    topo: Topology = sc.topology
    p = sc.params
    nodes = list(tr.nodes)
    n = len(nodes)
    col = {v: i for i, v in enumerate(nodes)}
    a, T = window if window is not None else (0.0, float(sc.duration))
    end = min(a + T, float(tr.t[-1]))
    rep = BoundReport(sc.name, (a, T))
    if a > float(tr.t[-1]) or a < float(tr.t[0]) - 1e-12:
        for name in CHECK_NAMES:
            rep.checks.append(Check(name, "", "skipped", note="window outside the trace"))
        return rep
    external = topo.virtual is not None
    v0c = col[VIRTUAL] if external else None
    drift = (p.zeta - 1.0) if external else (p.theta - 1.0)
    sigma = p.mu / drift if drift > 0 else math.inf
    eps = opt.epsilon

    O = nominal_offsets(sc.errors, a, T)
    lv = Levels(topo, O, nodes)
    s0 = lv.s0
    s1 = s0 + 1
    int_levels = list(range(s1, s1 + opt.levels + 1))
    W1 = lv.W(s1)
    rep.meta.update({"s0": s0, "W": {str(s): lv.W(s) for s in int_levels}, "sigma": sigma,
                     "external": external, "hypotheses": sc.hypotheses()})
    if p.mu > 2 * p.theta - 1:
        pass
    rep.meta["gate"] = "sigma >= 2" if sigma >= 2 else "sigma < 2: convergence checks skipped"

    t = tr.t
    win = (t >= a - 1e-12) & (t <= end + 1e-12)
    seg = np.cumsum(tr.kind == 3)
    idx = np.nonzero(win)[0]
    tw = t[idx]
    Lw = tr.L[idx]
    scale = 1.0 + float(np.abs(tr.L).max())
    tol = EPS_NUM * scale

    # held estimates in force at every sample
    ref = np.searchsorted(tr.refresh_sample, np.arange(len(t)), side="right") - 1
    arcs = tr.arcs
    a_idx = np.array([[col[v], col[w]] for v, w in arcs])
    a_delta = np.array([topo.delta_of(v, w) for v, w in arcs])
    a_O = np.array([O[(v, w)] for v, w in arcs])
    valid = idx[ref[idx] >= 0]
    held = tr.offsets[ref[valid]]
    true_diff = tr.L[valid][:, a_idx[:, 0]] - tr.L[valid][:, a_idx[:, 1]]
    e_eff = true_diff - held
    ratio = np.abs(e_eff - a_O) / a_delta
    # left limits at refresh instants use the previous estimates
    ticks = np.nonzero((tr.kind[tr.refresh_sample] == 0) & (np.arange(len(tr.refresh_sample)) > 0))[0]
    ticks = ticks[win[tr.refresh_sample[ticks]]]
    # a thinned trace may skip refreshes; only adjacent ones give a left limit
    if len(ticks):
        gap = t[tr.refresh_sample[ticks]] - t[tr.refresh_sample[ticks - 1]]
        ticks = ticks[gap <= sc.est_step * (1 + 1e-6) + 1e-12]
    if len(ticks):
        rows = tr.refresh_sample[ticks]
        left = tr.L[rows][:, a_idx[:, 0]] - tr.L[rows][:, a_idx[:, 1]] - tr.offsets[ticks - 1]
        ratio_left = np.abs(left - a_O) / a_delta
        ratio_all = np.vstack([ratio, ratio_left])
        times_all = np.concatenate([t[valid], t[rows]])
    else:
        ratio_all, times_all = ratio, t[valid]
    rep.checks.append(_bound_check("error_window", "|e_eff - O| < delta on every arc",
                                   ratio_all, 1.0, times_all, arcs, strict=True))

    # ---- rates
    same = (seg[idx[1:]] == seg[idx[:-1]]) & (np.diff(tw) > 1e-12)
    i0, i1 = idx[:-1][same], idx[1:][same]
    dt = (t[i1] - t[i0])[:, None]
    dL = (tr.L[i1] - tr.L[i0]) / dt
    dH = (tr.H[i1] - tr.H[i0]) / dt
    real_cols = [col[v] for v in nodes if v != VIRTUAL]
    rtol = 1e-7
    if len(i0):
        rL = dL[:, real_cols]
        rH = dH[:, real_cols]
        labels = [nodes[c] for c in real_cols]
        c_hi = _bound_check("rate_upper", "dL/dt <= (1+mu) theta", rL, p.beta, t[i0], labels, rtol)
        c_lo = _bound_check("rate_lower", "dL/dt >= 1", -rL, -p.alpha, t[i0], labels, rtol)
        h_hi = _bound_check("hardware_rate", "1 <= dH/dt <= theta",
                            np.maximum(rH - p.theta, 1.0 - rH), 0.0, t[i0], labels, rtol)
        rep.checks += [c_hi, c_lo, h_hi]
        if external:
            out = rL / p.zeta
            rep.checks.append(_bound_check(
                "output_rates", "1/zeta <= d(L/zeta)/dt <= theta(1+mu)/zeta",
                np.maximum(out - p.theta * (1 + p.mu) / p.zeta, 1.0 / p.zeta - out), 0.0, t[i0],
                labels, rtol))
    else:
        rep.checks.append(Check("rate_upper", "rates", "skipped", note="no sample pairs"))

    # ---- triggers vs modes, exclusion, conditions => triggers
    nb = topo.neighbors()
    m_bad, x_bad, sc_bad, fc_bad = [], [], [], []
    Oc = {k: (0.0 if opt.mutation == "drop-O" else v) for k, v in O.items()}
    for v in nodes:
        if v == VIRTUAL:
            continue
        ws = nb[v]
        ai = [arcs.index((v, w)) for w in ws]
        d = a_delta[ai]
        o = held[:, ai]
        st = slow_trigger_vec(o, d)
        ft = fast_trigger_vec(o, d)
        X = true_diff[:, ai] - np.array([Oc[(v, w)] for w in ws])
        scnd = slow_condition_vec(X, d)
        fcnd = fast_condition_vec(X, d)
        mode = tr.fast[valid, col[v]]
        m_bad.append(mode != ft)
        x_bad.append(st & ft)
        sc_bad.append(scnd & ~st)
        fc_bad.append(fcnd & ~ft)
    tv = t[valid]
    real_nodes = [v for v in nodes if v != VIRTUAL]
    for name, what, arr in (("mode_matches_trigger", "mode is fast iff the fast trigger holds", m_bad),
                            ("trigger_exclusion", "slow and fast triggers never hold together", x_bad),
                            ("slow_condition_implies_trigger", "slow condition => slow trigger", sc_bad),
                            ("fast_condition_implies_trigger", "fast condition => fast trigger", fc_bad)):
        B = np.stack(arr, axis=1) if arr else np.zeros((0, 0), bool)
        rep.checks.append(_bound_check(name, what, B.astype(float), 0.0, tv, real_nodes))

    # ---- potentials
    levels_needed = sorted({s0 + 0.5} | set(int_levels) | {s - 0.5 for s in int_levels})
    psi_v = {s: potential(Lw, lv.dist(s))[0] for s in levels_needed}
    psi = {s: pv.max(axis=1) for s, pv in psi_v.items()}
    G = Lw.max(axis=1) - Lw.min(axis=1)

    mono = np.stack([psi_v[hi] - psi_v[lo] for lo, hi in zip(levels_needed, levels_needed[1:])], axis=1) \
        if len(levels_needed) > 1 else np.zeros((len(tw), 0))
    rep.checks.append(_bound_check("level_monotone", "potentials nonincreasing in the level",
                                   mono.reshape(len(tw), -1), 0.0, tw, tol=tol))
    gl = np.stack([np.abs(G - psi[s]) - lv.W(s) for s in levels_needed], axis=1)
    rep.checks.append(_bound_check("global_vs_potential", "|G - Psi^s| <= W^s", gl, 0.0, tw,
                                   [str(s) for s in levels_needed], tol))
    edges = list(topo.edges)
    e_u = np.array([col[u] for u, _ in edges])
    e_w = np.array([col[w] for _, w in edges])
    Le = np.abs(Lw[:, e_u] - Lw[:, e_w])
    e_d = np.array([topo.delta[e] for e in edges])
    e_O = np.array([abs(O[e]) for e in edges])
    bound = np.min(np.stack([psi[s][:, None] + 4 * s * e_d[None, :] + e_O[None, :]
                             for s in int_levels]), axis=0)
    rep.checks.append(_bound_check("local_bound", "L_e <= min_s Psi^s + 4 s delta_e + |O_e|",
                                   Le, bound, tw, edges, tol))
    rep.meta["W_level"] = W1
    rep.meta["max_G"] = float(G.max())
    rep.meta["max_L"] = float(Le.max())
    if external:
        rep.meta["max_T"] = float(np.abs(Lw - Lw[:, [col[VIRTUAL]]]).max())
    if sigma > 1:
        # local skew estimate with the unspecified constant set to zero
        rep.meta["local_formula"] = float(np.max(e_O + 4 * e_d * (s1 + np.log(W1 / e_d) / math.log(sigma))))

    # ---- growth (waitup)
    pair = (seg[idx[1:]] == seg[idx[:-1]])
    j0 = np.nonzero(pair)[0]
    gdt = (tw[j0 + 1] - tw[j0])[:, None]
    grow = np.concatenate([(psi_v[s][j0 + 1] - psi_v[s][j0]) - drift * gdt for s in int_levels], axis=1) \
        if len(j0) else np.zeros((0, 1))
    rep.checks.append(_bound_check("waitup", "Psi_v^s grows at most at the drift rate", grow, 0.0,
                                   tw[j0] if len(j0) else tw[:0], None, tol + EPS_NUM * 10))

    # ---- catch-up
    cu_lhs, cu_t = [], []
    seg_w = seg[idx]
    seg_end_t = {}
    for sg in np.unique(seg_w):
        seg_end_t[sg] = tw[seg_w == sg].max()
    seg_end = np.array([seg_end_t[x] for x in seg_w])
    # first and last window index of every segment, to keep interpolation inside it
    first = np.searchsorted(seg_w, seg_w, side="left")
    last = np.searchsorted(seg_w, seg_w, side="right") - 1
    for s in int_levels:
        half = psi[s - 0.5]
        tstar = tw + half / p.mu
        ok = tstar <= seg_end + 1e-12
        if external:
            ok &= psi_v[s - 0.5][:, v0c] <= tol
        rows = np.nonzero(ok)[0]
        if not len(rows):
            continue
        j = np.searchsorted(tw, tstar[rows], side="left")
        # stay inside the segment of the starting sample
        j = np.clip(j, first[rows], last[rows])
        jm = np.maximum(j - 1, first[rows])
        t0, t1 = tw[jm], tw[j]
        f = np.where(t1 > t0, (tstar[rows] - t0) / np.where(t1 > t0, t1 - t0, 1.0), 1.0)
        f = np.clip(f, 0.0, 1.0)
        Lst = Lw[jm] + f[:, None] * (Lw[j] - Lw[jm])
        gain = Lst - Lw[rows] - (tstar[rows] - tw[rows])[:, None] - psi_v[s][rows]
        if external:
            gain[:, v0c] = np.inf
        cu_lhs.append(-gain)
        cu_t.append(tw[rows])
    if cu_lhs:
        rep.checks.append(_bound_check("catchup", "L_v(t') - L_v(t) >= t' - t + Psi_v^s(t)",
                                       np.vstack(cu_lhs), 0.0, np.concatenate(cu_t), nodes, tol * 10))
    else:
        rep.checks.append(Check("catchup", "catch-up", "skipped", note="no admissible sample"))

    # ---- convergence
    a_eff = a
    if external:
        Lz = _interp_row(tr, a)
        ps = potential(Lz, lv.dist(s1))[1]
        zero_by = a + ps / (p.zeta - p.theta)
        after = tw >= zero_by - 1e-12
        v0p = np.stack([psi_v[s][:, v0c] for s in int_levels], axis=1)
        c = _bound_check("v0_potential_zero", "Psi^s_{v0} = 0 after Psi^s(a)/(zeta-theta)",
                         v0p[after], 0.0, tw[after], [str(s) for s in int_levels], tol)
        c.note = f"deadline {zero_by:.6g}"
        rep.checks.append(c)
        Tsk = np.abs(Lw - Lw[:, [v0c]]).max(axis=1)
        rep.checks.append(_bound_check("real_time_skew", "T(t) <= G(t)", Tsk, G, tw, None, tol))
        a_eff = zero_by
        rep.meta["v0_zero_by"] = zero_by
    T_eff = T - (a_eff - a)
    La = _interp_row(tr, a_eff) if a_eff <= end else None
    conv_ok = sigma >= 2 and La is not None
    if La is not None:
        psi_a = potential(La, lv.dist(s1))[1]
        psi_half_a = potential(La, lv.dist(s1 - 0.5))[1]
        bound0 = 2 * W1 / (sigma - 1) + eps * psi_half_a if sigma > 1 else math.inf
        i0n = math.ceil(math.log(2 / eps, sigma)) if sigma > 1 else math.inf
        t_base = (2 * psi_a + i0n * 4 * W1) / p.mu
        t_step = sigma * bound0 / (p.mu * (sigma - 1)) if sigma > 1 else math.inf
        premise = t_base <= T_eff / 4 and t_step <= T_eff / 4
        rep.meta.update({"psi_a": psi_a, "psi_half_a": psi_half_a, "t_base": t_base,
                         "t_step": t_step, "T_eff": T_eff})
    late = tw >= a_eff + T_eff / 2 - 1e-12
    if conv_ok and premise and late.any():
        lhs = np.stack([psi[s][late] - bound0 / sigma ** (s - s1) for s in int_levels], axis=1)
        rep.checks.append(_bound_check("convergence", "Psi^{s'} <= (2W/(sigma-1) + eps Psi^{s-1/2}(a)) / sigma^{s'-s}",
                                       lhs, 0.0, tw[late], [str(s) for s in int_levels], tol))
        if psi_half_a <= W1 / (sigma - 1) + tol:
            cb = np.stack([psi[s][late] - (2 + eps) * W1 / (sigma ** (s - s1) * (sigma - 1))
                           for s in int_levels], axis=1)
            rep.checks.append(_bound_check("potential_bound", "Psi^{s'} <= (2+eps) W / (sigma^{s'-s}(sigma-1))",
                                           cb, 0.0, tw[late], [str(s) for s in int_levels], tol))
            rep.checks.append(_bound_check("global_bound", "G <= W + (2+eps) W/(sigma-1)", G[late],
                                           W1 + (2 + eps) * W1 / (sigma - 1), tw[late], None, tol))
        else:
            rep.checks.append(Check("potential_bound", "skew bounds from a small start", "skipped",
                                    note="initial potential exceeds W/(sigma-1)"))
        # measured constant in the local skew estimate
        const = (Le[late] - e_O) / (4 * e_d) - s1 - np.log(W1 / e_d) / math.log(sigma)
        rep.checks.append(Check("local_skew_constant", "implied O(1) term of the local skew estimate",
                                "measured", float(const.max()), None, None, int(const.size)))
    else:
        why = "sigma < 2" if sigma < 2 else ("window too short" if La is not None else "start beyond trace")
        rep.checks.append(Check("convergence", "potential convergence", "skipped", note=why))

    if p.stabilize or opt.expect_reset is not None:
        _stabilization_checks(tr, rep, opt, lv, O, t, seg)
    return rep


def _stabilization_checks(tr, rep: BoundReport, opt: VerifyOptions, lv: Levels, O, t, seg) -> None:
    sc = tr.scenario
    topo: Topology = sc.topology
    p = sc.params
    c = topo.c
    nodes = list(tr.nodes)
    col = {v: i for i, v in enumerate(nodes)}
    real = Topology(topo.real_nodes(), topo.real_edges(),
                    {e: topo.delta[e] for e in topo.real_edges()},
                    {e: topo.delay[e] for e in topo.real_edges()}, topo.root, topo.refs, topo.c)
    W_d = delay_diameter(real)
    s0 = lv.s0
    st0 = s0 + opt.stab_level_offset
    drift = (p.zeta - 1.0) if topo.virtual is not None else (p.theta - 1.0)
    sigma = p.mu / drift
    eps = opt.epsilon

    # everything below is measured from the last transient fault (or from time 0)
    t_fault = max([e["t"] for e in tr.events_of("fault")], default=0.0)

    # tree
    _, parent = shortest_path_tree(real)
    last_change = 0.0
    for e in tr.events_of("parent"):
        last_change = max(0.0, e["t"] - t_fault)
    fp = tr.parents()
    final = {v: fp.get(v) for v in real.nodes}
    match = all(final[v] == parent[v] for v in real.nodes)
    rep.checks.append(Check("tree_converged", "parents match the offline shortest-path tree 2 W_d after the last fault",
                            "pass" if match and last_change <= 2 * W_d + 1e-9 else "fail",
                            last_change, 2 * W_d, 2 * W_d - last_change, len(real.nodes),
                            None if match else {"final": final, "expected": parent}))

    decisions = [e for e in tr.events_of("decision") if not e.get("aborted")]
    resets = [e for e in decisions if e.get("reset")]
    if opt.expect_reset is not None:
        ok = bool(resets) == opt.expect_reset
        rep.checks.append(Check("reset_fired", "a reset fires iff one is expected", "pass" if ok else "fail",
                                float(len(resets)), None, None, len(decisions),
                                None if ok else {"decisions": len(decisions)}))

    s_top = s0 + 2 * c + 3
    for e in resets:
        rid = e["round"]
        done = max([r["t"] for r in tr.events_of("reset") if r["t"] >= e["t"]
                    and r["t"] <= e["t"] + W_d + 1e-9] + [e["t"]])
        tt = max(e["t"] + W_d, done)
        L = _interp_row(tr, tt)
        val = potential(L, lv.dist(st0))[1]
        cap = opt.reset_K * lv.W(st0)
        rep.checks.append(Check(f"post_reset_potential[{rid}]",
                                "Psi^{s~0} one delay diameter after a reset <= K W^{s~0}",
                                "pass" if val <= cap else "fail", val, cap, cap - val, 1, {"t": tt}))

    # stabilization time: last violation of the stabilized bounds
    W_st = lv.W(st0)
    Ls = tr.L
    G = Ls.max(axis=1) - Ls.min(axis=1)
    viol = G > W_st + (2 + eps) * W_st / (sigma - 1) + EPS_NUM * (1 + np.abs(Ls).max())
    for k in range(opt.levels + 1):
        ps = potential(Ls, lv.dist(st0 + k))[1]
        viol |= ps > (2 + eps) * W_st / (sigma ** k * (sigma - 1))
    bad = np.nonzero(viol)[0]
    t_stab = float(t[bad[-1]]) if len(bad) else 0.0
    t_round = min([d["t"] for d in decisions if d["t"] >= t_fault], default=math.inf)
    allowed = opt.stab_multiple * W_st / p.mu + t_round
    holds_at_end = not (len(bad) and bad[-1] == len(t) - 1)
    rep.meta.update({"t_stab": t_stab, "t_round": t_round, "t_fault": t_fault, "stab_allowed": allowed,
                     "W_stab_level": W_st, "W_d": W_d})
    rep.checks.append(Check("stabilization_time", "stabilized bounds hold from t_stab on, t_stab small",
                            "pass" if (t_stab <= allowed and holds_at_end) else "fail", t_stab, allowed,
                            allowed - t_stab, int(len(t)), {"t": t_stab}))

    after = np.arange(len(t)) > (bad[-1] if len(bad) else -1)
    if after.any() and holds_at_end:
        edges = list(topo.edges)
        e_d = np.array([topo.delta[e] for e in edges])
        e_O = np.array([abs(O[e]) for e in edges])
        ii = [col[u] for u, _ in edges]
        jj = [col[w] for _, w in edges]
        Le = np.abs(Ls[after][:, ii] - Ls[after][:, jj])
        const = (Le - e_O) / (4 * e_d) - st0 - np.log(W_st / e_d) / math.log(sigma)
        rep.checks.append(Check("stab_local_constant", "implied O(1) term of the stabilized local skew",
                                "measured", float(const.max()), None, None, int(const.size)))

    # estimate sandwich at every completed round, using true clocks at the root's capture time
    mp = max_path_delta(topo)
    Wdelta = float(_floyd(_delta_matrix(topo, nodes)).max())
    caps_by_round: Dict[int, List[dict]] = {}
    for e in tr.events_of("capture"):
        caps_by_round.setdefault(e["round"], []).append(e)
    lo_l, hi_l, agree, top_lo, s1_lo = [], [], [], [], []
    for d in decisions:
        caps = caps_by_round.get(d["round"], [])
        root_cap = [e for e in caps if e["node"] == topo.root]
        if not root_cap:
            continue
        t_r = root_cap[-1]["t"]
        captured = {}
        for e in caps:
            for w, o in e["offsets"].items():
                captured[(e["node"], w)] = o
        deltas = {edge_key(v, w): topo.delta_of(v, w) for (v, w) in captured}
        try:
            orc = _oracle(captured, deltas, c)
        except ValueError:
            continue
        agree.append(abs(orc.psi - d["psi"]) + abs(orc.s0_tilde - d["s0_tilde"]))
        L = _interp_row(tr, t_r)
        s_low = math.ceil(4 * (orc.level + (c + 1) / 4.0) - 1e-9) / 4.0
        lo_l.append((potential(L, lv.dist(s_low))[1], d["psi"], t_r))
        hi_l.append((d["psi"], potential(L, lv.dist(s0 + 0.5))[1] + (2 * c + 1) * mp + 2 * Wdelta, t_r))
        top_lo.append(potential(L, lv.dist(s_top))[1] - d["psi"])
        s1_lo.append(potential(L, lv.dist(s0 + 1))[1] - d["psi"])
    if lo_l:
        lo = np.array(lo_l)
        hi = np.array(hi_l)
        rep.checks.append(_bound_check("psi_sandwich_lower", "Psi^{k+(c+1)/4}(t_r) <= psi",
                                       lo[:, 0], lo[:, 1], lo[:, 2], None, EPS_NUM * 100))
        rep.checks.append(_bound_check("psi_sandwich_upper",
                                       "psi <= Psi^{s0+1/2}(t_r) + (2c+1) maxpath delta + 2 W_delta",
                                       hi[:, 0], hi[:, 1], hi[:, 2], None, EPS_NUM * 100))
        rep.checks.append(_bound_check("estimate_oracle_agreement", "protocol estimate equals the oracle",
                                       np.array(agree), 1e-9, lo[:, 2]))
        rep.checks.append(Check("psi_lower_at_top_level", "Psi^{s0+2c+3}(t_r) - psi", "measured",
                                float(max(top_lo)), 0.0, None, len(top_lo)))
        rep.checks.append(Check("psi_lower_at_s1", "Psi^{s0+1}(t_r) - psi", "measured",
                                float(max(s1_lo)), 0.0, None, len(s1_lo)))
    else:
        rep.checks.append(Check("psi_sandwich_lower", "estimate sandwich", "skipped", note="no completed round"))


def _delta_matrix(topo: Topology, nodes: Sequence[Node]) -> np.ndarray:
    idx = {v: i for i, v in enumerate(nodes)}
    M = np.full((len(nodes), len(nodes)), np.inf)
    for (u, v) in topo.edges:
        M[idx[u], idx[v]] = M[idx[v], idx[u]] = topo.delta[(u, v)]
    return M
