import math
import random

import pytest
from hypothesis import assume, given, strategies as st

from gcslab.analysis import estimate_psi_oracle
from gcslab.clocks import FAST, SLOW, LogicalClockState
from gcslab.protocol import (Message, NodeContext, NodeState, ProtocolParams, StepInput,
                             TreeState, SnapshotState, computational_step, estimate_from_captures,
                             eval_fast_trigger, eval_slow_trigger, tree_step)
from gcslab.topology import edge_key

from conftest import connected_atlas

P = ProtocolParams(mu=0.1, theta=1.01)


def scan_slow(o, d, smax=60):
    """Slow trigger straight from its definition, trying every level up to smax."""
    for s in range(smax):
        if any(x > (4 * s - 1) * e for x, e in zip(o, d)) and all(x > -(4 * s + 1) * e for x, e in zip(o, d)):
            return True
    return False


def scan_fast(o, d, smax=60):
    for s in range(smax):
        if any(x < -(4 * s + 1) * e for x, e in zip(o, d)) and all(x < (4 * s + 3) * e for x, e in zip(o, d)):
            return True
    return False


# ---------------------------------------------------------------- triggers

def test_slow_trigger_examples():
    assert eval_slow_trigger([0.5], [1.0])
    assert eval_slow_trigger([3.5, -4.5], [1.0, 1.0])
    assert not eval_slow_trigger([-1.5], [1.0])


def test_fast_trigger_examples():
    assert eval_fast_trigger([-1.5], [1.0])
    assert not eval_fast_trigger([3.5, -4.5], [1.0, 1.0])
    assert not eval_fast_trigger([0.0, 0.0, 0.0], [1.0, 0.5, 2.0])


offsets = st.lists(st.tuples(st.floats(-40, 40), st.floats(0.05, 3)), min_size=1, max_size=5)


@given(offsets)
def test_triggers_match_definition_scan(pairs):
    o = [x for x, _ in pairs]
    d = [e for _, e in pairs]
    assert eval_slow_trigger(o, d) == scan_slow(o, d)
    assert eval_fast_trigger(o, d) == scan_fast(o, d)


@given(offsets)
def test_triggers_exclusive(pairs):
    o = [x for x, _ in pairs]
    d = [e for _, e in pairs]
    assert not (eval_slow_trigger(o, d) and eval_fast_trigger(o, d))


# ----------------------------------------------------------------- steps

def ctx_for(node=1, nbrs=(0, 2), delta=1.0, delay=1.0, root=False):
    return NodeContext(node, tuple(nbrs), {w: delta for w in nbrs}, {w: delay for w in nbrs},
                       is_root=root, reference=0)


def test_step_switches_to_fast():
    st0 = NodeState(1, LogicalClockState(10.0, 3.0, SLOW))
    new, msgs, fx = computational_step(st0, StepInput(5.0, {0: -2.0, 2: 0.0}), ctx_for(), P)
    assert new.clock.L == pytest.approx(12.0)
    assert new.clock.mode == FAST and msgs == []


def test_step_zero_offsets_slow():
    st0 = NodeState(1, LogicalClockState(0.0, 0.0, FAST))
    new, _, _ = computational_step(st0, StepInput(1.0, {0: 0.0, 2: 0.0}), ctx_for(), P)
    assert new.clock.mode == SLOW
    assert new.clock.L == pytest.approx(1.1)


def test_reset_order_shifts_clock():
    p = ProtocolParams(mu=0.1, theta=1.01, stabilize=True)
    st0 = NodeState(1, LogicalClockState(20.0, 4.0, SLOW), {0: 0.0, 2: 0.0},
                    snap=SnapshotState(round_id=3, depth=2.0))
    msg = Message("reset-order", 0, 1, (3, ((1, -7.0), (2, 1.0))))
    new, out, fx = computational_step(st0, StepInput(6.0, None, (msg,)), ctx_for(), p)
    assert new.clock.L == pytest.approx(20.0 + 2.0 - 7.0)
    assert fx.reset_applied == -7.0
    assert {m.dst for m in out} == {0, 2}
    # a second copy of the same order is ignored
    again, _, fx2 = computational_step(new, StepInput(6.0, None, (msg,)), ctx_for(), p)
    assert again.clock.L == new.clock.L and fx2.reset_applied is None


def test_invert_fast_mutation():
    p = ProtocolParams(mu=0.1, theta=1.01, mutation="invert-fast")
    st0 = NodeState(1, LogicalClockState())
    new, _, _ = computational_step(st0, StepInput(1.0, {0: 0.0, 2: 0.0}), ctx_for(), p)
    assert new.clock.mode == FAST


def test_root_timer_sends_zero():
    st0 = NodeState(0, LogicalClockState(), tree=TreeState({1: 9.0}, 1))
    _, msgs = tree_step(st0, None, 1, ctx_for(0, (1,), root=True))
    assert len(msgs) == 1 and msgs[0].payload[0] == 0.0 and msgs[0].dst == 1


def test_tree_variable_update():
    st0 = NodeState(1, LogicalClockState())
    new, _ = tree_step(st0, Message("tree-distance", 0, 1, (5.0, -2, 5.0)), None,
                       ctx_for(1, (0, 2), delay=2.0))
    assert new.tree.dist[0] == 7.0 and new.tree.parent == 0


def test_message_encoding_is_canonical():
    a = Message("reset-order", 0, 1, (3, ((1, -7.0),)), 2.5)
    b = Message("reset-order", 0, 1, (3, ((1, -7.0),)), 2.5)
    c = Message("reset-order", 0, 1, (3, ((1, -7.5),)), 2.5)
    assert a.to_bytes() == b.to_bytes() != c.to_bytes()


def test_params_check():
    assert ProtocolParams(mu=0.08, theta=1.01, zeta=1.02).check() == []
    assert ProtocolParams(mu=0.01, theta=1.01, zeta=1.02).check()
    assert ProtocolParams(mu=-1.0, theta=1.0).check()


# -------------------------------------------------------------- estimator

def test_equal_clocks_give_twice_delta_diameter():
    caps = {(0, 1): 0.0, (1, 0): 0.0, (1, 2): 0.0, (2, 1): 0.0}
    delta = {(0, 1): 1.0, (1, 2): 1.0}
    est = estimate_from_captures(caps, delta, 0)
    assert est.s0_tilde == 0
    assert est.psi == pytest.approx(2 * est.w_delta) == pytest.approx(4.0)


@given(st.integers(0, 10_000))
def test_estimator_matches_oracle(seed):
    rng = random.Random(seed)
    g = rng.choice(connected_atlas(5))
    edges = sorted((min(u, v), max(u, v)) for u, v in g.edges())
    delta = {e: rng.uniform(0.1, 1.0) for e in edges}
    L = {v: rng.uniform(-5, 5) for v in g.nodes()}
    caps = {}
    for u, v in edges:
        caps[(u, v)] = L[u] - L[v] + rng.uniform(-2, 2)
        caps[(v, u)] = L[v] - L[u] + rng.uniform(-2, 2)
    c = rng.choice([0.5, 1.0, 2.0])
    est = estimate_from_captures(caps, delta, 0, c)
    s0, psi = estimate_psi_oracle(caps, delta, c)
    assert est.s0_tilde == s0
    assert est.psi == pytest.approx(psi, abs=1e-9)
