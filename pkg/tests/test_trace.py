import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deapcache.errors import ConfigError, EmptyTraceError, TraceFormatError
from deapcache.trace import NEVER, Trace, label_trace, load_trace, synth_trace, write_trace

A, B, C = 0xA0, 0xB0, 0xC0


def brute_labels(addrs, cap):
    n = len(addrs)
    reuse, freq, nxt = [], [], []
    for i in range(n):
        later = [j for j in range(i + 1, n) if addrs[j] == addrs[i]]
        nxt.append(later[0] if later else NEVER)
        reuse.append(later[0] - i if later else cap)
        freq.append(len(later))
    return reuse, freq, nxt


def test_load_single_record(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0x0040,0xDEADBEEF\n")
    tr = load_trace(p)
    rec = tr.records[0]
    assert (rec.pc, rec.address, rec.index) == (0x40, 0xDEADBEEF, 0)


def test_load_three_lines_with_header_and_decimal(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("# pc,address\n0x1,0x10\n\n2,32\n0x3,0x30\n")
    tr = load_trace(p)
    assert [r.index for r in tr.records] == [0, 1, 2]
    assert tr.addresses.tolist() == [16, 32, 48]


def test_load_empty_file(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("")
    with pytest.raises(EmptyTraceError):
        load_trace(p)


@pytest.mark.parametrize("line", ["0x1", "0x1,zz", "1,2,3"])
def test_load_malformed_line_reports_line_number(tmp_path, line):
    p = tmp_path / "t.csv"
    p.write_text("0x1,0x2\n" + line + "\n")
    with pytest.raises(TraceFormatError) as exc:
        load_trace(p)
    assert exc.value.line == 2
    assert "line 2" in str(exc.value)


def test_write_then_load_round_trip(tmp_path):
    tr = synth_trace("zipf", 300, 5)
    p = tmp_path / "z.csv"
    write_trace(p, tr)
    back = load_trace(p)
    assert np.array_equal(back.addresses, tr.addresses)
    assert np.array_equal(back.pcs, tr.pcs)


def test_label_examples():
    lt = label_trace(Trace([0] * 5, [A, B, A, C, A]), cap=100)
    assert lt.reuse_distance.tolist() == [2, 100, 2, 100, 100]
    assert lt.future_frequency.tolist() == [2, 0, 1, 0, 0]


def test_label_empty():
    lt = label_trace(Trace([], []), cap=100)
    assert len(lt) == 0 and lt.reuse_distance.size == 0


def test_label_default_cap_and_bad_cap():
    lt = label_trace(Trace([0, 0], [A, B]))
    assert lt.cap == 3
    with pytest.raises(ConfigError):
        label_trace(Trace([0, 0, 0], [A, B, A]), cap=3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 12), max_size=200))
def test_labels_match_brute_force(addrs):
    cap = len(addrs) + 1
    lt = label_trace(Trace([0] * len(addrs), addrs), cap)
    reuse, freq, nxt = brute_labels(addrs, cap)
    assert lt.reuse_distance.tolist() == reuse
    assert lt.future_frequency.tolist() == freq
    assert lt.next_use.tolist() == nxt


def test_labels_match_brute_force_long():
    rng = np.random.default_rng(0)
    addrs = rng.integers(0, 300, size=2000).tolist()
    lt = label_trace(Trace([0] * 2000, addrs))
    reuse, freq, nxt = brute_labels(addrs, 2001)
    assert lt.reuse_distance.tolist() == reuse
    assert lt.future_frequency.tolist() == freq


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 6)), min_size=1, max_size=100))
def test_next_use_points_at_first_recurrence_and_pc_independent(pairs):
    pcs = [p for p, _ in pairs]
    addrs = [a for _, a in pairs]
    lt = label_trace(Trace(pcs, addrs))
    other = label_trace(Trace([0] * len(addrs), addrs))
    assert np.array_equal(lt.reuse_distance, other.reuse_distance)
    assert np.array_equal(lt.future_frequency, other.future_frequency)
    for i, j in enumerate(lt.next_use.tolist()):
        if j != NEVER:
            assert addrs[j] == addrs[i]
            assert addrs[i] not in addrs[i + 1:j]
    assert lt.cap > len(addrs)


def test_synth_cyclic_example():
    tr = synth_trace("cyclic", 8, 3)
    a = tr.addresses.tolist()
    assert a[:4] == a[4:] and len(set(a[:4])) == 4


@pytest.mark.parametrize("kind", ["cyclic", "zipf", "adversarial", "program"])
def test_synth_deterministic(kind):
    a = synth_trace(kind, 2000, 7)
    b = synth_trace(kind, 2000, 7)
    assert np.array_equal(a.addresses, b.addresses) and np.array_equal(a.pcs, b.pcs)
    assert len(a) == 2000
    assert a.addresses.max() <= 0xFFFFFFFF and a.addresses.min() >= 0


def test_synth_zipf_top_share():
    tr = synth_trace("zipf", 1000, 1)
    _, counts = np.unique(tr.addresses, return_counts=True)
    assert counts.max() / 1000 > 1 / len(counts)


def test_synth_unknown_kind():
    with pytest.raises(ConfigError):
        synth_trace("nope", 10, 0)
    with pytest.raises(ConfigError):
        synth_trace("cyclic", 0, 0)


def test_program_trace_has_never_reused_stream():
    tr = synth_trace("program", 20000, 2)
    never = tr.next_use == NEVER
    assert 0.05 < never.mean() < 0.5
