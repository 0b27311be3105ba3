import math

import numpy as np
import pytest
from scipy import stats

from bdmhj.errors import AssumptionWarning, ConfigError, InvariantViolation
from bdmhj.model import (ConstantFunction, CosineFunction, GaussianKernel, ModelSpec, RateFunctions,
                         ScalingParams, wrap_offset)
from bdmhj.process import (EventRecord, InitRule, LeapControl, PopulationState, _leap_size, apply_event,
                           events_from_log, init_state, make_rng, next_event, simulate_tau_leap,
                           simulate_until)

from conftest import constant_rates, cosine_rates, make_spec


def no_mutation(b=2.0, d=1.0):
    return RateFunctions(ConstantFunction(b), ConstantFunction(d), ConstantFunction(0.0))


# -- initial condition

def test_init_uniform_default():
    spec = make_spec(K=1e4, m=11)
    st = init_state(spec)
    assert st.counts.tolist() == [100] * 11


def test_init_constant_profile():
    spec = make_spec(K=1e4, m=11)
    st = init_state(spec, InitRule("profile", profile=ConstantFunction(0.5)))
    assert np.all(st.counts == 100)


def test_init_cosine_profile():
    spec = make_spec(K=1e4, m=11)
    st = init_state(spec, InitRule("profile", profile=CosineFunction(0.5, 0.2)))
    assert st.counts[0] == 631


def test_init_below_floor():
    # K large enough that every scaling inequality holds literally, so strict mode is usable
    strict = ModelSpec(GaussianKernel(1.0), constant_rates(), ScalingParams(K=1e12, m=100, a1=0.95, a=0.9, a2=0.85), strict=True)
    with pytest.raises(ConfigError):
        init_state(strict, InitRule("uniform", count=50))
    lax = make_spec(K=1e4, m=11)
    with pytest.warns(AssumptionWarning):
        st = init_state(lax, InitRule("uniform", count=50))
    assert st.counts[0] == 50


def test_init_explicit_shape_checked():
    spec = make_spec(K=1e3, m=7)
    with pytest.raises(ConfigError):
        init_state(spec, InitRule("explicit", counts=(40,) * 6))


# -- single-event examples

def test_lone_individual_kind_frequencies():
    spec = make_spec(K=1e3, m=7, rates=no_mutation())
    rng = make_rng(11, "test")
    n = 30000
    clonal = 0
    for _ in range(n):
        st = PopulationState(spec, [0, 0, 0, 1, 0, 0, 0])
        ev = next_event(st, rng)
        assert ev.site == 3
        clonal += ev.kind == "clonal_birth"
    assert stats.binomtest(clonal, n, 2 / 3).pvalue > 1e-3


def test_empty_sites_never_chosen(rng):
    spec = make_spec(K=1e3, m=7)
    st = PopulationState(spec, [0, 5, 0, 0, 2, 0, 0])
    for _ in range(3000):
        assert next_event(st, rng).site in (1, 4)


def test_site_frequencies_proportional_to_counts(rng):
    spec = make_spec(K=1e3, m=7)
    n = 20000
    hits = 0
    for _ in range(n):
        st = PopulationState(spec, [3, 5, 0, 0, 0, 0, 0])
        hits += next_event(st, rng).site == 1
    assert stats.binomtest(hits, n, 5 / 8).pvalue > 1e-3


def test_extinct_state_has_no_event(rng):
    st = PopulationState(make_spec(), np.zeros(7, dtype=int))
    assert next_event(st, rng) is None


def test_death_empties_site():
    spec = make_spec(K=1e3, m=7)
    st = PopulationState(spec, [1, 0, 0, 0, 0, 0, 0])
    apply_event(st, EventRecord("death", 0, 0.5))
    assert st.counts.sum() == 0
    assert st.total_rate == 0.0
    assert st.time == 0.5


def test_mutant_birth_goes_to_target():
    spec = make_spec(K=1e3, m=7)
    st = PopulationState(spec, [3, 3, 3, 3, 3, 3, 3])
    apply_event(st, EventRecord("mutant_birth", 6, 0.1, target_site=0))
    assert st.counts.tolist() == [4, 3, 3, 3, 3, 3, 3]


def test_clonal_birth_raises_total_rate():
    spec = make_spec(K=1e3, m=7)
    st = PopulationState(spec, [3] * 7)
    before = st.total_rate
    apply_event(st, EventRecord("clonal_birth", 2, 0.1))
    assert st.total_rate - before == pytest.approx(2.0 + 1.0 + spec.s_k, rel=1e-12)


def test_death_at_empty_site_raises():
    st = PopulationState(make_spec(), [0, 1, 1, 1, 1, 1, 1])
    with pytest.raises(InvariantViolation):
        apply_event(st, EventRecord("death", 0, 0.1))


def test_event_before_state_time_raises():
    st = PopulationState(make_spec(), [1] * 7, time=1.0)
    with pytest.raises(InvariantViolation):
        apply_event(st, EventRecord("clonal_birth", 0, 0.5))


def test_event_record_validation():
    with pytest.raises(ValueError):
        EventRecord("mutant_birth", 0, 0.0)
    with pytest.raises(ValueError):
        EventRecord("death", 0, 0.0, target_site=1)


def test_mutation_target_wraps():
    spec = make_spec(K=1e3, m=7)
    st = init_state(spec)
    sampler = st.sampler
    for u in np.linspace(0, 0.999, 50):
        off = sampler.offset(u)
        assert sampler.target(6, u) == (6 + off) % 7
        assert sampler.target(0, u) == off % 7


# -- driver

def test_zero_horizon_returns_initial_snapshot(rng):
    spec = make_spec()
    st = init_state(spec)
    res = simulate_until(st, 0.0, spec, rng)
    assert res.n_events == 0
    assert len(res.snapshots) == 1
    assert res.final.counts.tolist() == st.counts.tolist()


def test_observation_times_are_exact(rng):
    spec = make_spec()
    seen = []
    res = simulate_until(init_state(spec), 0.2, spec, rng, observers=[seen.append], observe_at=[0.05, 0.1])
    assert [s.t_rescaled for s in seen] == pytest.approx([0.05, 0.1, 0.2], abs=1e-15)
    assert res.final is seen[-1]


def test_requires_generator():
    spec = make_spec()
    with pytest.raises(ConfigError):
        simulate_until(init_state(spec), 0.1, spec, None)


def test_determinism():
    spec = make_spec(rates=cosine_rates())
    logs = []
    for seed in (5, 5, 6):
        res = simulate_until(init_state(spec), 0.2, spec, make_rng(seed, "test"), record_events=True)
        logs.append(res.event_log)
    for key in ("kind", "site", "target", "time"):
        assert np.array_equal(logs[0][key], logs[1][key])
    assert not np.array_equal(logs[0]["time"][:100], logs[2]["time"][:100])


def test_pure_birth_is_monotone(rng):
    spec = make_spec(rates=no_mutation(b=1.5, d=0.0))
    totals = []
    res = simulate_until(init_state(spec), 0.3, spec, rng, observers=[lambda s: totals.append(s.counts.sum())],
                         observe_at=np.linspace(0, 0.3, 16), record_events=True)
    assert np.all(res.event_log["kind"] == 0)
    assert np.all(np.diff(totals) >= 0)


def test_coherence_after_many_events():
    spec = make_spec(K=1e3, m=7, rates=cosine_rates())
    st = init_state(spec)
    res = simulate_until(st, 50.0, spec, make_rng(2, "test"), max_events=10**6)
    assert res.truncated and st.n_events == 10**6
    assert st.coherence_error() < 1e-9


def test_budget_truncation_is_reported(rng):
    spec = make_spec()
    res = simulate_until(init_state(spec), 1.0, spec, rng, max_events=1000)
    assert res.truncated
    assert res.n_events == 1000


def test_log_spans_several_chunks():
    # more than one internal log buffer's worth of events
    spec = make_spec()
    res = simulate_until(init_state(spec), 0.5, spec, make_rng(3, "test"), record_events=True)
    assert res.n_events > 1 << 16
    assert res.event_log["time"].size == res.n_events
    assert np.all(np.diff(res.event_log["time"]) >= 0)


def test_engine_matches_reference_stepper():
    spec = make_spec(rates=cosine_rates())
    fast = init_state(spec, track_ledger=True)
    slow = fast.copy()
    res = simulate_until(fast, 0.15, spec, make_rng(1, "test"), record_events=True)
    r2 = make_rng(1, "test")
    for ev in events_from_log(res.event_log):
        assert next_event(slow, r2) == ev
        apply_event(slow, ev)
    slow.clock[0] = fast.time
    slow.close_ledger()
    assert np.array_equal(fast.counts, slow.counts)
    np.testing.assert_allclose(slow.A_int, fast.A_int, rtol=1e-12)
    np.testing.assert_allclose(slow.Q_int, fast.Q_int, rtol=1e-12)


def test_ledger_matches_piecewise_integration():
    spec = make_spec(rates=cosine_rates())
    st = init_state(spec, track_ledger=True)
    N = st.counts.astype(float)
    res = simulate_until(st, 0.2, spec, make_rng(4, "test"), record_events=True)
    m = spec.m
    W = np.zeros((m, m))
    for off, w in zip(spec.offsets, spec.offset_weights):
        for j in range(m):
            W[(j + off) % m, j] += w

    def integrands(n):
        up = np.where(n >= 1, np.log1p(1 / np.maximum(n, 1)), 0.0)
        dn = np.where(n >= 2, np.log1p(-1 / np.maximum(n, 2)), 0.0)
        rb = spec.b * n + W @ (n * spec.p)
        return rb * up + spec.d * n * dn, rb * up ** 2 + spec.d * n * dn ** 2

    A = np.zeros(m)
    Q = np.zeros(m)
    t = 0.0
    for ev in events_from_log(res.event_log):
        fa, fq = integrands(N)
        A += fa * (ev.time - t)
        Q += fq * (ev.time - t)
        t = ev.time
        N[ev.affected_site] += -1 if ev.kind == "death" else 1
    fa, fq = integrands(N)
    A += fa * (st.time - t)
    Q += fq * (st.time - t)
    np.testing.assert_allclose(res.final.A_int, A, rtol=1e-9, atol=1e-9 * np.abs(A).max())
    np.testing.assert_allclose(res.final.Q_int, Q, rtol=1e-9, atol=1e-9 * np.abs(Q).max())


# -- distributional checks against closed forms

def test_mean_growth_without_mutation():
    K, T = 1e3, 0.4
    spec = make_spec(K=K, m=2, rates=no_mutation())
    n0 = math.ceil(K ** 0.5)
    finals = []
    for r in range(200):
        st = PopulationState(spec, [n0, 0])
        finals.append(simulate_until(st, T, spec, make_rng(8, "test", K, r)).final.counts[0])
    finals = np.array(finals, dtype=float)
    se = finals.std(ddof=1) / math.sqrt(finals.size)
    assert abs(finals.mean() - n0 * K ** T) < 3 * se


def test_extinction_probability_linear_birth_death():
    # one lineage of a linear birth-death process is extinct by t with probability
    # d (e^{(b-d)t} - 1) / (b e^{(b-d)t} - d)
    b, d, K, T = 2.0, 1.0, 1e3, 0.3
    spec = make_spec(K=K, m=2, rates=no_mutation(b, d))
    t = T * math.log(K)
    e = math.exp((b - d) * t)
    q = d * (e - 1) / (b * e - d)
    n = 4000
    extinct = 0
    rng = make_rng(9, "test")
    for _ in range(n):
        st = PopulationState(spec, [2, 0])
        extinct += simulate_until(st, T, spec, rng, keep_snapshots=False).extinct
    assert stats.binomtest(extinct, n, q * q).pvalue > 1e-3


def test_engine_offset_frequencies():
    spec = make_spec(K=1e3, m=7)
    res = simulate_until(init_state(spec), 50.0, spec, make_rng(10, "test"), record_events=True,
                         max_events=800_000, keep_snapshots=False)
    log = res.event_log
    mut = log["kind"] == 2
    offs = wrap_offset(log["target"][mut] - log["site"][mut], spec.m)
    obs = np.array([(offs == o).sum() for o in spec.offsets])
    w = spec.offset_weights
    _, pval = stats.chisquare(obs, obs.sum() * w / w.sum())
    assert mut.sum() > 100_000
    assert pval > 1e-3


# -- tau-leaping

def test_leap_size_respects_bound():
    counts = np.array([100, 400, 50])
    b = np.array([2.0, 1.0, 3.0])
    d = np.array([1.0, 1.0, 1.0])
    inflow = np.array([5.0, 0.0, 2.0])
    eps = 0.03
    tau = _leap_size(counts, (b, d, inflow), eps)
    mu = np.abs(b * counts + inflow - d * counts)
    var = b * counts + inflow + d * counts
    bound = np.maximum(eps * counts, 1.0)
    assert np.all(mu * tau <= bound * (1 + 1e-12))
    assert np.all(var * tau <= bound ** 2 * (1 + 1e-12))
    assert np.any(np.isclose(mu * tau, bound)) or np.any(np.isclose(var * tau, bound ** 2))


def test_leap_control_validation():
    with pytest.raises(ConfigError):
        LeapControl(epsilon=0.0)
    with pytest.raises(ConfigError):
        LeapControl(critical_count=-1)


def test_tau_leap_matches_exact_means():
    K, T = 1e3, 0.2
    spec = make_spec(K=K, m=7, rates=cosine_rates())
    exact, leap = [], []
    for r in range(60):
        st = init_state(spec)
        exact.append(simulate_until(st, T, spec, make_rng(12, "test", K, r)).final.counts.sum())
        st = init_state(spec)
        res = simulate_tau_leap(st, T, spec, make_rng(12, "tau_leap", K, r), LeapControl(epsilon=0.01))
        assert res.event_log["n_leaps"] > 0
        leap.append(res.final.counts.sum())
    exact = np.array(exact, float)
    leap = np.array(leap, float)
    se = math.sqrt(exact.var(ddof=1) / exact.size + leap.var(ddof=1) / leap.size)
    assert abs(exact.mean() - leap.mean()) < 3 * se
