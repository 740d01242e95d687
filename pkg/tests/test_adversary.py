import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gcslab.adversary import (ErrorTrace, FaultSpec, corrupt_initial_state, estimate_step,
                              generate_error_trace, generate_rate_schedule, rng_for,
                              scenario_cycle_asymmetric, scenario_external, scenario_uniform,
                              validate_error_trace)
from gcslab.analysis import nominal_offsets, verify_trace
from gcslab.engine import simulate
from gcslab.protocol import ProtocolParams
from gcslab.topology import VIRTUAL, cycle, line

P = ProtocolParams(mu=0.04, theta=1.01)


def brute_force_violations(tr):
    """Every pair of grid points a window of length T can see, checked directly."""
    span = tr.length if math.isinf(tr.T) else int(math.ceil(tr.T / tr.step - 1e-9)) + 1
    bad = set()
    for (v, w) in tr.arcs():
        a = tr.values[(v, w)]
        b = tr.values[(w, v)]
        d = tr.delta[(v, w)]
        for i in range(len(a)):
            for j in range(i, min(len(a), i + span)):
                if abs(a[i] - a[j]) >= d:
                    bad.add((min(v, w), max(v, w), "drift"))
                if a[i] + b[j] >= d or a[j] + b[i] >= d or a[i] + b[j] <= -d or a[j] + b[i] <= -d:
                    bad.add((min(v, w), max(v, w), "antisymmetry"))
    return bad


@given(st.integers(0, 10_000), st.floats(0.5, 3.0), st.floats(0.2, 2.0))
def test_validator_agrees_with_brute_force(seed, T, scale):
    rng = rng_for(seed, "test")
    vals = {(0, 1): rng.uniform(-scale, scale, 12), (1, 0): rng.uniform(-scale, scale, 12)}
    tr = ErrorTrace(0.5, vals, T, {(0, 1): 1.0, (1, 0): 1.0})
    got = {(min(v.arc), max(v.arc), v.kind) for v in validate_error_trace(tr)}
    assert got == brute_force_violations(tr)


def test_generated_trace_is_clean():
    t = cycle(5, 1.0, 1.0)
    tr = generate_error_trace(t, 4, 60.0, 10.0, step=0.5)
    assert validate_error_trace(tr) == []
    # a short brute-force pass over the same trace
    short = ErrorTrace(tr.step, {a: v[:60] for a, v in tr.values.items()}, tr.T, tr.delta)
    assert brute_force_violations(short) == set()


def test_constant_bias_trace():
    t = line(2, 1.0, 1.0)
    tr = generate_error_trace(t, 1, 10.0, math.inf, {(0, 1): 2.0})
    assert np.all(tr.values[(0, 1)] == 2.0) and np.all(tr.values[(1, 0)] == -2.0)
    assert validate_error_trace(tr) == []
    assert nominal_offsets(tr, 0.0, math.inf)[(0, 1)] == 2.0


def test_infinite_window_means_constant():
    tr = generate_error_trace(cycle(4, 0.5, 1.0), 2, 20.0, math.inf, step=0.25)
    for v in tr.values.values():
        assert np.ptp(v) == 0.0


def test_bias_must_be_antisymmetric():
    with pytest.raises(ValueError):
        generate_error_trace(line(2, 1.0, 1.0), 0, 5.0, 5.0, {(0, 1): 1.0, (1, 0): 1.0})


def test_rate_laws():
    assert generate_rate_schedule(1.01, 0, 100.0, "constant").rates == [1.005]
    sq = generate_rate_schedule(1.01, 0, 100.0, "square-wave", period=10.0)
    assert set(sq.rates) == {1.0, 1.01}
    assert all(a != b for a, b in zip(sq.rates, sq.rates[1:]))
    rw = generate_rate_schedule(1.01, 3, 500.0, "random-walk", period=5.0)
    assert 1.0 <= rw.min_rate() and rw.max_rate() <= 1.01
    with pytest.raises(ValueError):
        generate_rate_schedule(1.01, 0, 10.0, "sine")


def test_split_law_is_two_sided():
    sc = scenario_uniform("line", 4, 0.05, 0.05, P, duration=20.0, rate_law="split")
    assert [sc.rates[v].rates for v in range(5)] == [[1.01]] * 3 + [[1.0]] * 2


def test_estimate_step_budget():
    t = line(3, 0.05, 0.5)
    h = estimate_step(t, P)
    assert h * (P.beta - P.alpha) <= 0.1 * 0.05 and math.log2(h).is_integer()


def test_uniform_regimes():
    sc = scenario_uniform("line", 4, 0.05, 0.05, P, seed=2, duration=20.0)
    assert all(b == 0 for b in sc.meta["bias"].values())
    sc = scenario_uniform("line", 4, 1.0, 0.05, P, seed=2, duration=20.0)
    assert max(abs(b) for b in sc.meta["bias"].values()) <= 0.95
    assert len(sc.topology.nodes) == 5 and sc.in_spec


def test_single_edge_local_skew():
    sc = scenario_uniform("line", 1, 1.0, 0.05, P, seed=4, duration=150.0)
    rep = verify_trace(simulate(sc))
    assert rep.passed, rep.failures()
    O = nominal_offsets(sc.errors, 0.0, 150.0)
    # the local bound reduces to |O| plus a few multiples of delta
    assert rep.get("local_bound").lhs <= abs(O[(0, 1)]) + 4 * 2 * 0.05 + rep.meta["W"]["1"]


def test_cycle_zero_bias_stays_at_zero():
    p = ProtocolParams(mu=0.04, theta=1.01)
    sc = scenario_cycle_asymmetric(4, 0.0, 0.01, p, duration=30.0, rate_law="constant")
    tr = simulate(sc)
    assert np.abs(tr.L - tr.L[:, :1]).max() < 1e-9
    # with drifting oscillators the skews only wander inside the verified bounds
    sc = scenario_cycle_asymmetric(4, 0.0, 0.01, p, duration=30.0)
    assert verify_trace(simulate(sc)).passed


def test_cycle_observed_skews():
    sc = scenario_cycle_asymmetric(4, 4.0, 0.001, ProtocolParams(mu=0.004, theta=1.001),
                                   duration=60.0)
    tr = simulate(sc)
    L = tr.L[-1]
    for i in range(3):
        assert L[i + 1] - L[i] == pytest.approx(1.0, abs=0.01)
    assert L[3] - L[0] == pytest.approx(3.0, abs=0.03)


def test_zero_spread_is_identity():
    sc = scenario_uniform("line", 3, 1.0, 0.05, P, duration=10.0)
    same = corrupt_initial_state(sc, FaultSpec(spread=0.0))
    assert same.initial_L == sc.initial_L and same.initial_states == sc.initial_states


def test_spread_scatters_clocks():
    sc = scenario_uniform("line", 3, 1.0, 0.05, P, duration=10.0)
    bad = corrupt_initial_state(sc, FaultSpec(spread=50.0, garbage=True, seed=1))
    vals = list(bad.initial_L.values())
    assert max(vals) - min(vals) <= 50.0 and max(vals) - min(vals) > 1.0
    assert bad.initial_states is not None


def test_external_reference_arcs_antisymmetric():
    sc = scenario_external(3, 1.0, 0.05, ProtocolParams(mu=0.08, theta=1.01), 1.02, duration=20.0)
    tr = sc.errors
    a, b = tr.values[(0, VIRTUAL)], tr.values[(VIRTUAL, 0)]
    assert np.allclose(a, -b)
    assert validate_error_trace(tr) == []
    assert sc.params.zeta == 1.02 and sc.topology.virtual == VIRTUAL
