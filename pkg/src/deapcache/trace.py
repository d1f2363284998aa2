"""Memory-access traces: loading, ground-truth labels and synthetic generators.

A trace is an ordered list of (pc, address) pairs. Labels are computed per
trace segment: the reuse distance of access ``i`` is the number of steps until
the same address is touched again, and its future frequency is the number of
later accesses to that address.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyTraceError, TraceFormatError

NEVER = -1
MASK32 = 0xFFFFFFFF

SYNTH_KINDS = ("cyclic", "zipf", "adversarial", "program")


@dataclass(frozen=True)
class TraceRecord:
    pc: int
    address: int
    index: int


class Trace:
    """Unlabeled trace, stored column-wise."""

    def __init__(self, pcs, addresses):
        self.pcs = np.asarray(pcs, dtype=np.int64).reshape(-1)
        self.addresses = np.asarray(addresses, dtype=np.int64).reshape(-1)
        if self.pcs.shape != self.addresses.shape:
            raise ValueError("pcs and addresses must have equal length")

    def __len__(self):
        return int(self.addresses.shape[0])

    @property
    def records(self):
        return [TraceRecord(int(p), int(a), i)
                for i, (p, a) in enumerate(zip(self.pcs.tolist(), self.addresses.tolist()))]

    def __iter__(self):
        return iter(self.records)

    def slice(self, start, stop):
        return Trace(self.pcs[start:stop], self.addresses[start:stop])


class LabeledTrace(Trace):
    """Trace plus reuse-distance, future-frequency and next-use columns."""

    def __init__(self, pcs, addresses, reuse_distance, future_frequency, next_use, cap):
        super().__init__(pcs, addresses)
        self.reuse_distance = np.asarray(reuse_distance, dtype=np.int64)
        self.future_frequency = np.asarray(future_frequency, dtype=np.int64)
        self.next_use = np.asarray(next_use, dtype=np.int64)
        self.cap = int(cap)

    def slice(self, start, stop, cap=None):
        return label_trace(Trace(self.pcs[start:stop], self.addresses[start:stop]), cap)


def _parse_int(token, lineno):
    token = token.strip()
    try:
        if token.lower().startswith("0x"):
            value = int(token, 16)
        else:
            value = int(token, 10)
    except ValueError:
        raise TraceFormatError(f"cannot parse integer {token!r}", lineno) from None
    if not 0 <= value <= MASK32:
        raise TraceFormatError(f"value {token!r} is not a 32-bit unsigned integer", lineno)
    return value


def load_trace(path, fmt="csv"):
    """Read a ``pc,address`` text trace. One record per line, ``#`` lines skipped."""
    if fmt != "csv":
        raise ConfigError(f"unknown trace format {fmt!r}")
    pcs, addrs = [], []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise TraceFormatError(f"expected 2 comma-separated fields, got {len(parts)}", lineno)
            pcs.append(_parse_int(parts[0], lineno))
            addrs.append(_parse_int(parts[1], lineno))
    if not addrs:
        raise EmptyTraceError(f"trace {os.fspath(path)!r} contains no records")
    return Trace(pcs, addrs)


def write_trace(path, trace):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("# pc,address\n")
        for pc, addr in zip(trace.pcs.tolist(), trace.addresses.tolist()):
            fh.write(f"0x{pc:08x},0x{addr:08x}\n")


def label_trace(records, cap=None):
    """Attach reuse-distance, future-frequency and next-use labels.

    ``records`` may be a :class:`Trace` or a sequence of :class:`TraceRecord`.
    Addresses that never recur get reuse distance ``cap`` (default: length + 1).
    """
    if isinstance(records, Trace):
        pcs, addrs = records.pcs, records.addresses
    else:
        records = list(records)
        pcs = np.array([r.pc for r in records], dtype=np.int64)
        addrs = np.array([r.address for r in records], dtype=np.int64)
    n = len(addrs)
    if cap is None:
        cap = n + 1
    if cap <= n:
        raise ConfigError(f"label_cap must exceed the trace length ({cap} <= {n})")

    next_use = np.full(n, NEVER, dtype=np.int64)
    freq = np.zeros(n, dtype=np.int64)
    last_seen = {}
    seen_count = {}
    addr_list = addrs.tolist()
    for i in range(n - 1, -1, -1):
        a = addr_list[i]
        j = last_seen.get(a)
        if j is not None:
            next_use[i] = j
        freq[i] = seen_count.get(a, 0)
        last_seen[a] = i
        seen_count[a] = freq[i] + 1
    reuse = np.where(next_use == NEVER, cap, next_use - np.arange(n))
    return LabeledTrace(pcs, addrs, reuse, freq, next_use, cap)


def synth_trace(kind, length, seed, **params):
    """Deterministic synthetic trace generator.

    Kinds:
      cyclic       loop over ``period`` lines (default 4)
      zipf         Zipf-distributed accesses over ``distinct`` lines
      adversarial  heavy hitters interleaved with scan bursts that look recent
      program      mixture of phased hot objects, streaming scans and a loop
    """
    if length <= 0:
        raise ConfigError("synthetic trace length must be positive")
    rng = np.random.default_rng(seed)
    if kind == "cyclic":
        pcs, addrs = _cyclic(length, **params)
    elif kind == "zipf":
        pcs, addrs = _zipf(rng, length, **params)
    elif kind == "adversarial":
        pcs, addrs = _adversarial(rng, length, **params)
    elif kind == "program":
        pcs, addrs = _program(rng, length, **params)
    else:
        raise ConfigError(f"unknown synthetic trace kind {kind!r}; expected one of {SYNTH_KINDS}")
    return label_trace(Trace(pcs, addrs))


def _cyclic(length, period=4, base=0x10000000, stride=64, pc_base=0x00400000):
    pos = np.arange(length) % period
    return pc_base + 4 * pos, base + stride * pos


def _zipf(rng, length, distinct=64, exponent=1.2, base=0x10000000, stride=64, pc_base=0x00400000):
    ranks = np.arange(1, distinct + 1, dtype=np.float64)
    p = ranks ** -exponent
    p /= p.sum()
    ids = rng.choice(distinct, size=length, p=p)
    return pc_base + 4 * (ids % 16), base + stride * ids


def _adversarial(rng, length, hot=8, burst=24, hot_run=16, scan_repeat=1,
                 base=0x10000000, scan_base=0x40000000, stride=64, pc_base=0x00400000):
    # Runs of heavy-hitter accesses alternate with scan bursts of fresh lines
    # (each touched ``scan_repeat`` times in a row of passes), so past recency
    # favours scan lines that never return after the burst.
    pcs, addrs = [], []
    next_scan = 0
    while len(addrs) < length:
        for _ in range(hot_run):
            h = int(rng.integers(hot))
            pcs.append(pc_base + 4 * h)
            addrs.append(base + stride * h)
        lines = [scan_base + stride * (next_scan + k) for k in range(burst)]
        next_scan += burst
        for rep in range(scan_repeat):
            for ln in lines:
                pcs.append(pc_base + 0x100 + 4 * rep)
                addrs.append(ln)
    return np.array(pcs[:length]), np.array(addrs[:length]) & MASK32


def _program(rng, length, hot_objects=24, phase=(3000, 9000), zipf_exponent=0.8,
             loop_lines=40, mix=(0.55, 0.30, 0.15), mean_run=(48, 32, 40)):
    """Program-like mixture issued in bursts.

    The access stream alternates between three regimes, each lasting a
    geometric number of accesses (mean ``mean_run``), with regimes picked
    by weight ``mix``. Heap: each phase allocates a fresh group of
    ``hot_objects`` lines accessed with Zipf popularity. Stream: sequential
    64-byte scans through a large input buffer, never revisited. Loop: a
    small array swept cyclically. Each region is issued by its own PCs.
    """
    heap_base, stream_base, loop_base = 0x10000000, 0x7F000000, 0x20000000
    text_base = 0x00400000
    mix = np.asarray(mix, dtype=np.float64)
    mix = mix / mix.sum()
    mean_run = np.asarray(mean_run, dtype=np.float64)

    ranks = np.arange(1, hot_objects + 1, dtype=np.float64)
    weights = ranks ** -zipf_exponent
    weights /= weights.sum()

    # regime sequence: picks and run lengths drawn up front
    n_runs = int(length / mean_run.min()) + 2
    kinds = np.empty(0, dtype=np.int64)
    while kinds.shape[0] < length:
        picks = rng.choice(3, size=n_runs, p=mix)
        kinds = np.concatenate([kinds, np.repeat(picks, rng.geometric(1.0 / mean_run[picks]))])
    kinds = kinds[:length]
    hot_ranks = rng.choice(hot_objects, size=length, p=weights)
    pcs = np.empty(length, dtype=np.int64)
    addrs = np.empty(length, dtype=np.int64)

    next_obj = int(rng.integers(0, 1 << 12))
    stream_pos = int(rng.integers(0, 1 << 14))
    loop_pos = 0
    group = np.arange(next_obj, next_obj + hot_objects)
    perm = rng.permutation(hot_objects)
    phase_end = int(rng.integers(phase[0], phase[1] + 1))
    for t in range(length):
        if t >= phase_end:
            next_obj += hot_objects
            group = np.arange(next_obj, next_obj + hot_objects)
            perm = rng.permutation(hot_objects)
            phase_end = t + int(rng.integers(phase[0], phase[1] + 1))
        k = kinds[t]
        if k == 0:
            r = int(hot_ranks[t])
            obj = int(group[perm[r]])
            addrs[t] = heap_base + 64 * obj
            pcs[t] = text_base + 0x1000 + 4 * (r % 8)
        elif k == 1:
            addrs[t] = stream_base + 64 * stream_pos
            stream_pos += 1
            pcs[t] = text_base + 0x2000 + 4 * (stream_pos % 2)
        else:
            addrs[t] = loop_base + 64 * loop_pos
            loop_pos = (loop_pos + 1) % loop_lines
            pcs[t] = text_base + 0x3000
    return pcs, addrs & MASK32
