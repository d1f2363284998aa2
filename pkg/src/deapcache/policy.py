"""Online cache decisions: admission, prefetch selection and eviction.

The learned eviction policy is a two-expert regret minimiser in the style of
LeCaR: one expert evicts the line with the lowest predicted future frequency,
the other the line with the highest predicted reuse distance. Lines evicted
by an expert go to that expert's ghost list; a later miss on a ghost shifts
weight toward the other expert.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, LogicError
from .trace import NEVER

BASELINE_POLICIES = ("lru", "lfu", "fifo", "lifo")
LECAR_LAMBDA = 0.45


@dataclass(frozen=True)
class AdmissionConfig:
    alpha: float = 3000.0
    beta: float = 7000.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("admission thresholds must be non-negative")


def admit(f, r, cfg=AdmissionConfig()):
    """Admit when predicted future frequency exceeds alpha or reuse distance is below beta."""
    return bool(f > cfg.alpha or r < cfg.beta)


class PrefetchCandidate(NamedTuple):
    address: int
    bytes: tuple
    prob: float


def select_prefetch_candidates(byte_probs, n):
    """The ``n`` most probable addresses under independent per-byte marginals.

    Beam search over byte positions, keeping ``n`` prefixes. Because the
    factors are independent this is exact. Ties go to the lexicographically
    smaller byte tuple.
    """
    probs = np.asarray(byte_probs, dtype=np.float64)
    if n < 1:
        return []
    beam = [((), 1.0)]
    for row in probs:
        k = min(n, row.shape[0])
        # stable sort on -p keeps lower byte values first among equal probabilities
        top = np.argsort(-row, kind="stable")[:k]
        expanded = [(prefix + (int(b),), p * float(row[b])) for prefix, p in beam for b in top]
        expanded.sort(key=lambda item: (-item[1], item[0]))
        beam = expanded[:n]
    out = []
    for byte_tuple, p in beam:
        addr = 0
        for b in byte_tuple:
            addr = (addr << 8) | b
        out.append(PrefetchCandidate(addr, byte_tuple, p))
    return out


# --------------------------------------------------------------------------
# modified LeCaR

@dataclass
class EvictionCandidateScore:
    address: int
    f: float
    r: float
    last_access: int = 0


@dataclass
class LeCarState:
    capacity: int
    lr: float = LECAR_LAMBDA
    discount: float | None = None
    seed: int = 0
    weights: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    ghost_f: OrderedDict = field(default_factory=OrderedDict)
    ghost_r: OrderedDict = field(default_factory=OrderedDict)

    def __post_init__(self):
        if self.discount is None:
            self.discount = 0.005 ** (1.0 / self.capacity)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.rng = np.random.default_rng(self.seed)
        self.ghost_hits = 0

    @property
    def w_f(self):
        return float(self.weights[0])

    @property
    def w_r(self):
        return float(self.weights[1])

    def ghost(self, expert):
        return self.ghost_f if expert == "F" else self.ghost_r


def lecar_choose_victim(state, scores, now=0):
    """Sample an expert, let it pick a victim, and remember the victim in its ghost list.

    Returns ``(victim address, expert)`` where expert is ``"F"`` or ``"R"``.
    """
    if not scores:
        raise LogicError("no eviction candidates")
    expert = "F" if state.rng.random() < state.weights[0] else "R"
    if expert == "F":
        victim = min(scores, key=lambda s: (s.f, s.last_access)).address
    else:
        victim = min(scores, key=lambda s: (-s.r, s.last_access)).address
    other = state.ghost("R" if expert == "F" else "F")
    other.pop(victim, None)
    ghost = state.ghost(expert)
    ghost.pop(victim, None)
    if len(ghost) >= state.capacity:
        ghost.popitem(last=False)
    ghost[victim] = now
    return victim, expert


def lecar_update(state, address, now):
    """Regret update on a miss; returns the (possibly unchanged) weights."""
    if address in state.ghost_f:
        t0 = state.ghost_f.pop(address)
        rewarded = 1
    elif address in state.ghost_r:
        t0 = state.ghost_r.pop(address)
        rewarded = 0
    else:
        return state.weights
    state.ghost_hits += 1
    regret = state.discount ** (now - t0)
    state.weights[rewarded] *= math.exp(state.lr * regret)
    state.weights /= state.weights.sum()
    return state.weights


# --------------------------------------------------------------------------
# classical baselines and the clairvoyant oracle

@dataclass
class CacheEntry:
    last_access: int
    insert_time: int
    access_count: int = 1


def baseline_evict(policy, entries):
    """Victim under a classical policy; ``entries`` maps address -> :class:`CacheEntry`."""
    if not entries:
        raise LogicError("cannot evict from an empty cache")
    items = entries.items()
    if policy == "lru":
        return min(items, key=lambda kv: kv[1].last_access)[0]
    if policy == "lfu":
        return min(items, key=lambda kv: (kv[1].access_count, kv[1].last_access))[0]
    if policy == "fifo":
        return min(items, key=lambda kv: kv[1].insert_time)[0]
    if policy == "lifo":
        return max(items, key=lambda kv: kv[1].insert_time)[0]
    raise ConfigError(f"unknown baseline policy {policy!r}")


def belady_evict(residents, now=None):
    """Evict the resident whose next use is farthest away.

    ``residents`` maps address -> next-use index (``NEVER`` if none). Lines
    that are never used again win; remaining ties go to the lower address.
    """
    if not residents:
        raise LogicError("cannot evict from an empty cache")

    def key(kv):
        addr, nxt = kv
        return (math.inf if nxt == NEVER else nxt, -addr)

    return max(residents.items(), key=key)[0]
