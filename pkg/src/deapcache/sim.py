"""Trace-driven cache simulation for the learned policy and the baselines."""

from __future__ import annotations

import bisect
import csv
import io
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .kde import KdeWindow, distribution_vector
from .policy import (BASELINE_POLICIES, AdmissionConfig, CacheEntry, EvictionCandidateScore,
                     LeCarState, admit, baseline_evict, belady_evict, lecar_choose_victim,
                     lecar_update, select_prefetch_candidates)
from .trace import NEVER, LabeledTrace

ALL_POLICIES = BASELINE_POLICIES + ("belady", "deap")


@dataclass
class SimConfig:
    capacity: int = 32
    alpha: float = 3000.0
    beta: float = 7000.0
    miss_buffer: int = 50
    prefetch_interval: int = 30
    seq_len: int = 30
    prefetch_n: int = 5
    lecar_lambda: float = 0.45
    lecar_discount: float | None = None
    score_cache: str = "fresh"
    buffer_sampling: str = "recent"
    rng_seed: int = 0
    batch_size: int = 10000
    admit_all: bool = False
    initial_weights: tuple = (0.5, 0.5)

    def __post_init__(self):
        if self.score_cache not in ("fresh", "stale"):
            raise ConfigError(f"score_cache must be 'fresh' or 'stale', got {self.score_cache!r}")
        if self.buffer_sampling not in ("recent", "uniform"):
            raise ConfigError(f"buffer_sampling must be 'recent' or 'uniform', got {self.buffer_sampling!r}")
        if self.capacity < 1:
            raise ConfigError("capacity must be at least 1")


@dataclass
class Resident:
    last_access: int
    insert_time: int
    access_count: int = 1
    prefetched: bool = False
    score: tuple = (0.0, 0.0)


class CacheState:
    def __init__(self, capacity):
        self.capacity = capacity
        self.residents = {}
        self.clock = 0

    def __contains__(self, addr):
        return addr in self.residents

    def __len__(self):
        return len(self.residents)

    @property
    def full(self):
        return len(self.residents) >= self.capacity

    def insert(self, addr, now, **kw):
        assert len(self.residents) < self.capacity, "insert into a full cache"
        self.residents[addr] = Resident(now, now, **kw)

    def evict(self, addr):
        del self.residents[addr]


class MissBuffer:
    """The last ``k`` misses as (pc, address), oldest first."""

    def __init__(self, k):
        self.k = k
        self._buf = deque(maxlen=k)

    def append(self, pc, addr):
        self._buf.append((pc, addr))

    def __len__(self):
        return len(self._buf)

    def recent(self, n):
        items = list(self._buf)[-n:]
        return [p for p, _ in items], [a for _, a in items]

    def sample(self, n, rng):
        """``n`` entries drawn without replacement, kept in buffer order."""
        items = list(self._buf)
        idx = np.sort(rng.choice(len(items), size=n, replace=False))
        return [items[i][0] for i in idx], [items[i][1] for i in idx]


# --------------------------------------------------------------------------
# reports

@dataclass
class PolicyResult:
    accesses: int = 0
    hits: int = 0
    batch_hit_rates: list = field(default_factory=list)

    @property
    def hit_rate(self):
        return self.hits / self.accesses if self.accesses else 0.0

    def as_dict(self):
        return {"accesses": self.accesses, "hits": self.hits, "hit_rate": self.hit_rate,
                "batch_hit_rates": list(self.batch_hit_rates)}


@dataclass
class SimulationReport:
    policies: dict
    trace_name: str = ""
    capacity: int = 0
    learned: dict = field(default_factory=dict)

    def hit_rate(self, policy):
        return self.policies[policy].hit_rate

    def as_dict(self):
        out = {
            "trace": self.trace_name,
            "capacity": self.capacity,
            "policies": {name: self.policies[name].as_dict()
                         for name in ALL_POLICIES if name in self.policies},
        }
        if self.learned:
            out["learned"] = self.learned
        return out

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2) + "\n"

    def csv_rows(self):
        return [(self.trace_name, name, r["accesses"], r["hits"], f"{r['hit_rate']:.6f}")
                for name, r in self.as_dict()["policies"].items()]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("trace", "policy", "accesses", "hits", "hit_rate"))
        w.writerows(self.csv_rows())
        return buf.getvalue()


# --------------------------------------------------------------------------
# baselines

class _BaselineCache:
    def __init__(self, policy, capacity):
        self.policy = policy
        self.capacity = capacity
        self.entries = {}
        self.hits = 0

    def access(self, addr, now, next_use):
        entries = self.entries
        e = entries.get(addr)
        if e is not None:
            self.hits += 1
            e.last_access = now
            e.access_count += 1
            if self.policy == "belady":
                e.next_use = next_use
            return True
        if len(entries) >= self.capacity:
            if self.policy == "belady":
                victim = belady_evict({a: x.next_use for a, x in entries.items()}, now)
            else:
                victim = baseline_evict(self.policy, entries)
            del entries[victim]
        e = CacheEntry(now, now, 1)
        e.next_use = next_use
        entries[addr] = e
        return False


def run_baselines(trace, capacity, policies=BASELINE_POLICIES + ("belady",), batch_size=10000):
    """Simulate several demand-fetch policies in one pass over ``trace``."""
    for p in policies:
        if p not in BASELINE_POLICIES + ("belady",):
            raise ConfigError(f"unknown baseline policy {p!r}")
    if "belady" in policies and not isinstance(trace, LabeledTrace):
        raise ConfigError("belady needs a labelled trace")
    caches = [_BaselineCache(p, capacity) for p in policies]
    results = {p: PolicyResult() for p in policies}
    addrs = trace.addresses.tolist()
    next_use = trace.next_use.tolist() if isinstance(trace, LabeledTrace) else [NEVER] * len(addrs)
    batch_start = {p: 0 for p in policies}
    for t, a in enumerate(addrs):
        nu = next_use[t]
        for c in caches:
            c.access(a, t, nu)
        if (t + 1) % batch_size == 0 or t + 1 == len(addrs):
            n = t + 1 - (t // batch_size) * batch_size
            for c in caches:
                results[c.policy].batch_hit_rates.append((c.hits - batch_start[c.policy]) / n)
                batch_start[c.policy] = c.hits
    for c in caches:
        results[c.policy].accesses = len(addrs)
        results[c.policy].hits = c.hits
    return results


def run_baseline(trace, policy, capacity):
    """Hit rate of one demand-fetch policy."""
    return run_baselines(trace, capacity, (policy,))[policy].hit_rate


# --------------------------------------------------------------------------
# learned policy

class ModelPredictor:
    """Wraps a trained model for online use, memoising per-value embeddings."""

    def __init__(self, model, window):
        self.model = model
        self.window = KdeWindow(window, model.dims.kde_floor)
        self._addr = {}
        self._pc = {}
        self._d = None

    def _embed(self, memo, value, stream):
        v = memo.get(value)
        if v is None:
            v = memo[value] = self.model.embed_values(np.array([value]), stream)[0]
        return v

    def observe_miss(self, pc, addr):
        a = self._embed(self._addr, addr, "addr")
        p = self._embed(self._pc, pc, "pc")
        self.window.push(np.concatenate([a, p]))
        self._d = None

    def distribution(self):
        if self._d is None:
            self._d = distribution_vector(self.window, self.model.dims.kde_probes).values
        return self._d

    def score(self, addresses, now):
        A = np.stack([self._embed(self._addr, a, "addr") for a in addresses])
        f, r = self.model.decode_batch(A, self.distribution())
        return np.maximum(f, 0.0), np.maximum(r, 0.0)

    def prefetch_probs(self, pcs, addrs):
        e = np.stack([np.concatenate([self._embed(self._addr, a, "addr"), self._embed(self._pc, p, "pc")])
                      for p, a in zip(pcs, addrs)])
        return self.model.prefetch_from_embeddings(e)


class PastStatsPredictor:
    """Model-free scorer from cache bookkeeping, used as a test oracle.

    Frequency is the in-cache access count and reuse distance is the time
    since last access, so expert F acts like LFU and expert R like LRU (the
    original LeCaR pairing). Must be attached to a policy via ``bind``.
    """

    def __init__(self):
        self.state = None

    def bind(self, policy):
        self.state = policy.state

    def observe_miss(self, pc, addr):
        pass

    def score(self, addresses, now):
        res = self.state.residents
        f = np.array([res[a].access_count if a in res else 0 for a in addresses], dtype=np.float64)
        r = np.array([now - res[a].last_access if a in res else 0 for a in addresses], dtype=np.float64)
        return f, r

    def prefetch_probs(self, pcs, addrs):
        raise NotImplementedError("past-statistics scorer does not prefetch")


class FutureOraclePredictor:
    """Exact remaining-trace frequency and next-use distance for each address."""

    def __init__(self, trace):
        self.positions = {}
        for i, a in enumerate(trace.addresses.tolist()):
            self.positions.setdefault(a, []).append(i)
        self.cap = len(trace) + 1

    def observe_miss(self, pc, addr):
        pass

    def score(self, addresses, now):
        f, r = [], []
        for a in addresses:
            pos = self.positions.get(a, [])
            k = bisect.bisect_right(pos, now)
            f.append(len(pos) - k)
            r.append(pos[k] - now if k < len(pos) else self.cap)
        return np.array(f, dtype=np.float64), np.array(r, dtype=np.float64)

    def prefetch_probs(self, pcs, addrs):
        raise NotImplementedError("future oracle does not prefetch")


@dataclass
class StepResult:
    hit: bool
    admitted: bool | None = None
    evicted: list = field(default_factory=list)
    prefetched: list = field(default_factory=list)


class LearnedPolicy:
    """Admission + periodic prefetching + two-expert regret-minimising eviction."""

    def __init__(self, predictor, cfg=None):
        self.cfg = cfg = cfg or SimConfig()
        self.predictor = predictor
        self.state = CacheState(cfg.capacity)
        self.buffer = MissBuffer(cfg.miss_buffer)
        self.lecar = LeCarState(cfg.capacity, cfg.lecar_lambda, cfg.lecar_discount, cfg.rng_seed,
                                weights=np.array(cfg.initial_weights, dtype=np.float64))
        self.admission = AdmissionConfig(cfg.alpha, cfg.beta)
        self.rng = np.random.default_rng(cfg.rng_seed + 1)
        self.hits = 0
        self.admissions = 0
        self.rejections = 0
        self.prefetch_issued = 0
        self.prefetch_useful = 0
        self.evictions = {"F": 0, "R": 0}
        if hasattr(predictor, "bind"):
            predictor.bind(self)

    def _make_room(self, now):
        state = self.state
        addrs = list(state.residents)
        if self.cfg.score_cache == "fresh":
            f, r = self.predictor.score(addrs, now)
        else:
            f = [state.residents[a].score[0] for a in addrs]
            r = [state.residents[a].score[1] for a in addrs]
        scores = [EvictionCandidateScore(a, float(fi), float(ri), state.residents[a].last_access)
                  for a, fi, ri in zip(addrs, f, r)]
        victim, expert = lecar_choose_victim(self.lecar, scores, now)
        state.evict(victim)
        self.evictions[expert] += 1
        return victim

    def step(self, record):
        state = self.state
        now = state.clock
        assert record.index == now, f"record index {record.index} != clock {now}"
        addr, pc = record.address, record.pc
        result = StepResult(hit=addr in state)
        if result.hit:
            res = state.residents[addr]
            res.last_access = now
            res.access_count += 1
            if res.prefetched:
                res.prefetched = False
                self.prefetch_useful += 1
            self.hits += 1
        else:
            self.buffer.append(pc, addr)
            self.predictor.observe_miss(pc, addr)
            lecar_update(self.lecar, addr, now)
            f, r = self.predictor.score([addr], now)
            f, r = float(f[0]), float(r[0])
            result.admitted = self.cfg.admit_all or admit(f, r, self.admission)
            if result.admitted:
                self.admissions += 1
                if state.full:
                    result.evicted.append(self._make_room(now))
                state.insert(addr, now, score=(f, r))
            else:
                self.rejections += 1
        self._maybe_prefetch(now, result)
        assert len(state) <= state.capacity
        state.clock += 1
        return result

    def _maybe_prefetch(self, now, result):
        cfg = self.cfg
        if cfg.prefetch_n <= 0 or (now + 1) % cfg.prefetch_interval != 0:
            return
        if len(self.buffer) < cfg.seq_len:
            return
        if cfg.buffer_sampling == "recent":
            pcs, addrs = self.buffer.recent(cfg.seq_len)
        else:
            pcs, addrs = self.buffer.sample(cfg.seq_len, self.rng)
        probs = self.predictor.prefetch_probs(pcs, addrs)
        for cand in select_prefetch_candidates(probs, cfg.prefetch_n):
            a = cand.address
            if a in self.state:
                continue
            if self.state.full:
                result.evicted.append(self._make_room(now))
            f, r = self.predictor.score([a], now)
            self.state.insert(a, now, access_count=0, prefetched=True, score=(float(f[0]), float(r[0])))
            result.prefetched.append(a)
            self.prefetch_issued += 1

    def extras(self):
        return {
            "admissions": self.admissions,
            "rejections": self.rejections,
            "prefetch_issued": self.prefetch_issued,
            "prefetch_useful": self.prefetch_useful,
            "evictions_by_expert": dict(self.evictions),
            "final_weights": [float(w) for w in self.lecar.weights],
            "ghost_hits": self.lecar.ghost_hits,
        }


def run_learned(trace, predictor, cfg):
    policy = LearnedPolicy(predictor, cfg)
    result = PolicyResult(accesses=len(trace))
    batch_hits = 0
    n = len(trace)
    for rec in trace.records:
        if policy.step(rec).hit:
            batch_hits += 1
        if (rec.index + 1) % cfg.batch_size == 0 or rec.index + 1 == n:
            size = rec.index + 1 - (rec.index // cfg.batch_size) * cfg.batch_size
            result.batch_hit_rates.append(batch_hits / size)
            batch_hits = 0
    result.hits = policy.hits
    return result, policy


def run_simulation(trace, model, cfg=None, policies=ALL_POLICIES, trace_name=""):
    """Run the learned policy and the requested baselines over the same trace."""
    cfg = cfg or SimConfig()
    for p in policies:
        if p not in ALL_POLICIES:
            raise ConfigError(f"unknown policy {p!r}; expected a subset of {ALL_POLICIES}")
    baselines = tuple(p for p in ALL_POLICIES if p in policies and p != "deap")
    results = run_baselines(trace, cfg.capacity, baselines, cfg.batch_size) if baselines and len(trace) else {
        p: PolicyResult() for p in baselines}
    report = SimulationReport(results, trace_name, cfg.capacity)
    if "deap" in policies:
        if model is None:
            raise ConfigError("the learned policy needs a model")
        if cfg.seq_len > cfg.miss_buffer:
            raise ShapeError(f"prefetch sequence length {cfg.seq_len} exceeds miss buffer {cfg.miss_buffer}")
        predictor = ModelPredictor(model, cfg.miss_buffer)
        res, policy = run_learned(trace, predictor, cfg)
        report.policies["deap"] = res
        report.learned = policy.extras()
    return report
