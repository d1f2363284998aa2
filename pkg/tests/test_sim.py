import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deapcache.errors import ConfigError, ShapeError
from deapcache.model import DeapModel, ModelDims
from deapcache.policy import CacheEntry, baseline_evict
from deapcache.sim import (ALL_POLICIES, FutureOraclePredictor, LearnedPolicy, MissBuffer,
                           PastStatsPredictor, SimConfig, run_baseline, run_baselines, run_learned,
                           run_simulation)
from deapcache.trace import Trace, label_trace, synth_trace

from conftest import make_trace

A, B, C = 0xA0, 0xB0, 0xC0
SMALL = ModelDims(d_byte=4, d_addr=5, comb_hidden=8, lstm_hidden=6, dec_hidden=4, kde_probes=4,
                  seq_len=5, kde_window=8)


class FixedPredictor:
    """Scores every address the same; counts what it was shown."""

    def __init__(self, f=0.0, r=0.0, prefetch=None):
        self.f, self.r = f, r
        self.misses = []
        self.prefetch = prefetch

    def observe_miss(self, pc, addr):
        self.misses.append(addr)

    def score(self, addresses, now):
        n = len(addresses)
        return np.full(n, self.f), np.full(n, self.r)

    def prefetch_probs(self, pcs, addrs):
        return self.prefetch


def test_run_baseline_examples():
    assert run_baseline(make_trace([A, A, A]), "lru", 1) == pytest.approx(2 / 3)
    assert run_baseline(make_trace([A, B, A, C, B]), "lru", 2) == pytest.approx(1 / 5)
    assert run_baseline(make_trace([A, B, C, A, B]), "belady", 2) == pytest.approx(1 / 5)


def test_run_baseline_errors():
    with pytest.raises(ConfigError):
        run_baseline(make_trace([A]), "arc", 2)
    with pytest.raises(ConfigError):
        run_baseline(Trace([0], [A]), "belady", 2)


def _records(addrs):
    return make_trace(addrs).records


def test_step_hit_path():
    pol = LearnedPolicy(FixedPredictor(r=0.0), SimConfig(capacity=4, prefetch_n=0))
    recs = _records([A, A])
    pol.step(recs[0])
    before = dict(pol.state.residents)
    res = pol.step(recs[1])
    assert res.hit and set(pol.state.residents) == set(before)


def test_step_rejection_path():
    pol = LearnedPolicy(FixedPredictor(f=0.0, r=1e9), SimConfig(capacity=4, prefetch_n=0))
    res = pol.step(_records([A])[0])
    assert not res.hit and res.admitted is False
    assert len(pol.state) == 0 and len(pol.buffer) == 1 and pol.rejections == 1


def test_step_forced_eviction():
    pol = LearnedPolicy(FixedPredictor(), SimConfig(capacity=1, prefetch_n=0, admit_all=True))
    recs = _records([A, B])
    pol.step(recs[0])
    assert list(pol.state.residents) == [A]
    res = pol.step(recs[1])
    assert res.evicted == [A] and list(pol.state.residents) == [B]


def test_step_checks_clock():
    pol = LearnedPolicy(FixedPredictor(), SimConfig(capacity=2, prefetch_n=0))
    with pytest.raises(AssertionError):
        pol.step(_records([A, B])[1])


def test_prefetch_timer_and_bypass():
    probs = np.zeros((4, 256))
    probs[:, 0x11] = 1.0  # always predicts 0x11111111
    cfg = SimConfig(capacity=4, prefetch_n=1, prefetch_interval=3, seq_len=2, miss_buffer=4)
    pol = LearnedPolicy(FixedPredictor(r=1e9, prefetch=probs), cfg)
    trace = make_trace([1, 2, 3, 0x11111111, 5])
    out = [pol.step(r) for r in trace.records]
    # the timer fires after steps 2 (clock 2); prefetches bypass the rejecting admission
    assert out[2].prefetched == [0x11111111]
    assert out[3].hit and pol.prefetch_useful == 1
    assert pol.admissions == 0


def test_prefetch_waits_for_buffer():
    probs = np.full((4, 256), 1 / 256)
    cfg = SimConfig(capacity=4, prefetch_n=2, prefetch_interval=1, seq_len=3, miss_buffer=4)
    pol = LearnedPolicy(FixedPredictor(prefetch=probs), cfg)
    out = [pol.step(r) for r in make_trace([7, 8, 9]).records]
    assert out[0].prefetched == [] and out[1].prefetched == []
    assert out[2].prefetched == [0, 1]


def test_miss_buffer():
    buf = MissBuffer(3)
    for k in range(5):
        buf.append(k, 10 * k)
    assert len(buf) == 3 and buf.recent(2) == ([3, 4], [30, 40])
    pcs, addrs = buf.sample(2, np.random.default_rng(0))
    assert len(pcs) == 2 and addrs == sorted(addrs)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=300), st.integers(1, 6), st.booleans())
def test_learned_policy_invariants(addrs, capacity, admit_all):
    tr = make_trace(addrs)
    rng = np.random.default_rng(len(addrs))
    probs = rng.dirichlet(np.ones(256), size=4)
    probs[3, :16] += 5.0
    probs /= probs.sum(axis=1, keepdims=True)
    pred = FixedPredictor(f=1.0, r=float(rng.integers(0, 2)) * 1e9, prefetch=probs)
    cfg = SimConfig(capacity=capacity, admit_all=admit_all, prefetch_interval=3, seq_len=2, miss_buffer=4)
    pol = LearnedPolicy(pred, cfg)
    for rec in tr.records:
        was_resident = rec.address in pol.state
        res = pol.step(rec)
        assert res.hit == was_resident
        assert len(pol.state) <= capacity
    assert pol.hits + pol.admissions + pol.rejections == len(addrs)


def _lfu_reference(addrs, capacity):
    entries, hits = {}, 0
    for t, a in enumerate(addrs):
        if a in entries:
            hits += 1
            entries[a].last_access = t
            entries[a].access_count += 1
            continue
        if len(entries) >= capacity:
            del entries[baseline_evict("lfu", entries)]
        entries[a] = CacheEntry(t, t)
    return hits


def _future_lfu_reference(addrs, capacity):
    cache, hits = {}, 0
    for t, a in enumerate(addrs):
        if a in cache:
            hits += 1
            cache[a] = t
            continue
        if len(cache) >= capacity:
            rest = addrs[t + 1:]
            victim = min(cache, key=lambda x: (rest.count(x), cache[x]))
            del cache[victim]
        cache[a] = t
    return hits


def _reduced_cfg(capacity):
    return SimConfig(capacity=capacity, admit_all=True, prefetch_n=0, lecar_lambda=0.0,
                     initial_weights=(1.0, 0.0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=120), st.integers(1, 5))
def test_reduced_policy_matches_lfu(addrs, capacity):
    tr = make_trace(addrs)
    res, pol = run_learned(tr, PastStatsPredictor(), _reduced_cfg(capacity))
    assert res.hits == _lfu_reference(addrs, capacity)
    assert pol.lecar.weights.tolist() == [1.0, 0.0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=120), st.integers(1, 5))
def test_reduced_policy_with_future_frequency_oracle(addrs, capacity):
    tr = make_trace(addrs)
    res, _ = run_learned(tr, FutureOraclePredictor(tr), _reduced_cfg(capacity))
    assert res.hits == _future_lfu_reference(addrs, capacity)


def test_future_oracle_scores():
    tr = make_trace([A, B, A, C, A])
    f, r = FutureOraclePredictor(tr).score([A, B, C], 0)
    assert f.tolist() == [2, 1, 1] and r.tolist() == [2, 1, 3]
    f, r = FutureOraclePredictor(tr).score([B], 2)
    assert f.tolist() == [0] and r.tolist() == [6]


def test_one_pass_equals_separate_runs():
    tr = synth_trace("zipf", 3000, 4)
    together = run_baselines(tr, 8)
    for p, res in together.items():
        assert res.hits == run_baselines(tr, 8, (p,))[p].hits


def test_batch_rates():
    tr = synth_trace("zipf", 2500, 1)
    res = run_baselines(tr, 8, ("lru",), batch_size=1000)["lru"]
    assert len(res.batch_hit_rates) == 3
    assert sum(r * n for r, n in zip(res.batch_hit_rates, (1000, 1000, 500))) == pytest.approx(res.hits)


def test_empty_trace_report():
    tr = label_trace(Trace([], []))
    rep = run_simulation(tr, DeapModel.create(SMALL), SimConfig(seq_len=5, miss_buffer=8))
    assert set(rep.policies) == set(ALL_POLICIES)
    for r in rep.policies.values():
        assert r.accesses == 0 and r.hit_rate == 0.0


def test_simulation_report_and_determinism():
    tr = synth_trace("zipf", 400, 2)
    model = DeapModel.create(SMALL, seed=3)
    cfg = SimConfig(capacity=8, seq_len=5, miss_buffer=8, prefetch_interval=10)
    r1 = run_simulation(tr, model, cfg, trace_name="z")
    r2 = run_simulation(tr, model, cfg, trace_name="z")
    assert r1.to_json() == r2.to_json() and r1.to_csv() == r2.to_csv()
    data = json.loads(r1.to_json())
    assert list(data["policies"]) == list(ALL_POLICIES)
    for name, p in data["policies"].items():
        assert p["hit_rate"] == pytest.approx(p["hits"] / p["accesses"])
        assert 0 <= p["hit_rate"] <= 1
    for key in ("admissions", "rejections", "prefetch_issued", "prefetch_useful", "final_weights"):
        assert key in data["learned"]
    assert len(r1.to_csv().strip().splitlines()) == 1 + len(ALL_POLICIES)


def test_simulation_policy_subset_and_errors():
    tr = synth_trace("zipf", 200, 2)
    rep = run_simulation(tr, None, SimConfig(capacity=4), policies=("lru", "belady"))
    assert list(rep.as_dict()["policies"]) == ["lru", "belady"]
    with pytest.raises(ConfigError):
        run_simulation(tr, None, SimConfig(), policies=("lru", "mru"))
    with pytest.raises(ConfigError):
        run_simulation(tr, None, SimConfig(), policies=("deap",))
    with pytest.raises(ShapeError):
        run_simulation(tr, DeapModel.create(SMALL), SimConfig(seq_len=30, miss_buffer=8), policies=("deap",))


def test_stale_scores_and_uniform_sampling_run():
    tr = synth_trace("zipf", 300, 5)
    model = DeapModel.create(SMALL, seed=1)
    for cfg in (SimConfig(capacity=4, seq_len=5, miss_buffer=8, score_cache="stale", admit_all=True),
                SimConfig(capacity=4, seq_len=5, miss_buffer=8, buffer_sampling="uniform", prefetch_interval=7)):
        a = run_simulation(tr, model, cfg, ("deap",)).to_json()
        assert a == run_simulation(tr, model, cfg, ("deap",)).to_json()


def test_sim_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(score_cache="cached")
    with pytest.raises(ConfigError):
        SimConfig(buffer_sampling="random")
    with pytest.raises(ConfigError):
        SimConfig(capacity=0)
