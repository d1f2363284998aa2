"""Acceptance suite: one test per headline criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured value
before asserting, so ``pytest -v`` output doubles as the scorecard.
"""

import functools
import time

import numpy as np
import pytest

from deapcache.cli import main as cli_main
from deapcache.embed import Word2VecConfig, pretrain_word2vec
from deapcache.kde import bandwidth_silverman, kde_density, log_kde
from deapcache.model import (DeapModel, ModelDims, TrainConfig, LossWeights, byte_accuracy,
                             forward_backward, lru_miss_indices, make_samples, train)
from deapcache.nn import grad_check
from deapcache.sim import (BASELINE_POLICIES, LearnedPolicy, PastStatsPredictor, SimConfig, run_baselines,
                           run_learned, run_simulation)
from deapcache.trace import synth_trace

from conftest import make_trace


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


# --------------------------------------------------------------------------
# independent, deliberately naive baseline references

def naive_hits(addrs, capacity, policy):
    cache = []  # [address, insert_time, last_access, count]
    hits = 0
    for t, a in enumerate(addrs):
        row = next((r for r in cache if r[0] == a), None)
        if row is not None:
            hits += 1
            row[2] = t
            row[3] += 1
            continue
        if len(cache) == capacity:
            if policy == "lru":
                victim = min(cache, key=lambda r: r[2])
            elif policy == "lfu":
                victim = min(cache, key=lambda r: (r[3], r[2]))
            elif policy == "fifo":
                victim = min(cache, key=lambda r: r[1])
            else:  # lifo
                victim = max(cache, key=lambda r: r[1])
            cache.remove(victim)
        cache.append([a, t, t, 1])
    return hits


def exhaustive_best_hits(addrs, capacity):
    """Maximum demand-fetch hit count over every eviction sequence."""

    @functools.lru_cache(maxsize=None)
    def best(t, resident):
        if t == len(addrs):
            return 0
        a = addrs[t]
        if a in resident:
            return 1 + best(t + 1, resident)
        if len(resident) < capacity:
            return best(t + 1, resident | {a})
        return max(best(t + 1, (resident - {v}) | {a}) for v in resident)

    return best(0, frozenset())


def random_traces(n, max_len, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(1, max_len + 1))
        distinct = int(rng.integers(1, 80))
        if rng.random() < 0.5:
            ids = rng.integers(0, distinct, size=length)
        else:  # skewed popularity
            p = 1.0 / np.arange(1, distinct + 1)
            ids = rng.choice(distinct, size=length, p=p / p.sum())
        out.append(make_trace((0x1000 + 64 * ids).tolist()))
    return out


@pytest.fixture(scope="module")
def baseline_runs():
    """One-pass simulator results and naive references on 100 random traces."""
    t0 = time.perf_counter()
    rows = []
    for tr in random_traces(100, 5000, seed=2024):
        addrs = tr.addresses.tolist()
        for cap in (2, 8, 32):
            sim = run_baselines(tr, cap)
            ref = {p: naive_hits(addrs, cap, p) for p in BASELINE_POLICIES}
            rows.append((sim, ref))
    return rows, time.perf_counter() - t0


def test_baseline_oracle_equivalence(baseline_runs, verdict):
    rows, elapsed = baseline_runs
    mismatches = sum(sim[p].hits != ref[p] for sim, ref in rows for p in BASELINE_POLICIES)
    ok = mismatches == 0 and elapsed < 60
    verdict("baseline oracle equivalence", ok,
            f"{mismatches} mismatches over {len(rows)} (trace, capacity) pairs x 4 policies, {elapsed:.1f}s")


def test_belady_dominance(baseline_runs, verdict):
    t0 = time.perf_counter()
    rows, _ = baseline_runs
    dominated = sum(any(sim[p].hits > sim["belady"].hits for p in BASELINE_POLICIES) for sim, _ in rows)
    rng = np.random.default_rng(7)
    exhaustive_bad = 0
    n_small = 300
    for _ in range(n_small):
        length = int(rng.integers(1, 13))
        cap = int(rng.integers(1, 4))
        addrs = rng.integers(0, 6, size=length).tolist()
        belady = run_baselines(make_trace(addrs), cap, ("belady",))["belady"].hits
        exhaustive_bad += belady != exhaustive_best_hits(tuple(addrs), cap)
    elapsed = time.perf_counter() - t0
    ok = dominated == 0 and exhaustive_bad == 0 and elapsed < 120
    verdict("Belady dominance", ok,
            f"{dominated} pairs where a baseline beat Belady; {exhaustive_bad}/{n_small} exhaustive "
            f"mismatches; {elapsed:.1f}s")


# --------------------------------------------------------------------------

TINY = ModelDims(d_byte=3, d_addr=4, comb_hidden=6, lstm_hidden=4, dec_hidden=5, kde_probes=3,
                 seq_len=5, kde_window=6, label_scale=0.01)


def test_gradient_correctness(verdict):
    t0 = time.perf_counter()
    tr = synth_trace("zipf", 200, 3)
    batch = make_samples(tr, np.arange(200), TINY.kde_window).batch(np.array([5, 17]))
    worst = 0.0
    for seed in (0, 1):
        m = DeapModel.create(TINY, seed=seed)

        def loss(params):
            m.params = params
            losses, grads = forward_backward(m, batch, LossWeights(), temperature=1.0)
            return losses.total, grads

        rep = grad_check(loss, m.params, max_coords=300, seed=seed)
        worst = max(worst, rep.max_rel_error)
    elapsed = time.perf_counter() - t0
    verdict("gradient correctness", worst < 1e-4 and elapsed < 60,
            f"max relative error {worst:.2e} (up to 300 coordinates per array, 2 seeds), {elapsed:.1f}s")


LEARN_PERIOD, LEARN_LENGTH, LEARN_HELD_OUT = 4, 40000, 4000


def test_learnability(verdict):
    t0 = time.perf_counter()
    tr = synth_trace("cyclic", LEARN_LENGTH, 0, period=LEARN_PERIOD)
    tables, _ = pretrain_word2vec([tr], Word2VecConfig())
    model = DeapModel.create(ModelDims(), seed=0, tables=tables)
    idx = np.arange(len(tr))  # every access is a miss
    split = LEARN_LENGTH - LEARN_HELD_OUT
    train_set = make_samples(tr, idx[:split], model.dims.kde_window)
    held_out = make_samples(tr, idx[split:], model.dims.kde_window)
    _, steps, _ = train(model, train_set, TrainConfig())
    total = np.array([s[3] for s in steps])
    smooth = np.convolve(total, np.ones(10) / 10, mode="valid")
    acc = byte_accuracy(model, held_out)
    elapsed = time.perf_counter() - t0
    ok = acc.min() > 0.9 and smooth[-1] < 0.5 * smooth[0] and elapsed < 600
    verdict("learnability", ok,
            f"held-out byte accuracy {np.round(acc, 3).tolist()}, smoothed L_total {smooth[0]:.3f} -> "
            f"{smooth[-1]:.3f} over {len(total)} steps, {elapsed:.0f}s")


def test_lecar_convergence(verdict):
    t0 = time.perf_counter()
    tr = synth_trace("adversarial", 60000, 0)
    cfg = SimConfig(capacity=8, admit_all=True, prefetch_n=0, lecar_lambda=0.45)
    pol = LearnedPolicy(PastStatsPredictor(), cfg)
    reached = None
    for rec in tr.records:
        pol.step(rec)
        if pol.lecar.w_f > 0.9:
            reached = pol.lecar.ghost_hits
            break
    frozen_cfg = SimConfig(capacity=8, admit_all=True, prefetch_n=0, lecar_lambda=0.0)
    _, frozen = run_learned(tr, PastStatsPredictor(), frozen_cfg)
    frozen_w = frozen.lecar.weights.tolist()
    elapsed = time.perf_counter() - t0
    ok = (reached is not None and reached <= 10_000 and frozen_w == [0.5, 0.5]
          and frozen.lecar.ghost_hits > 0 and elapsed < 60)
    verdict("LeCaR convergence", ok,
            f"w_F > 0.9 after {reached} ghost hits; lambda=0 weights {frozen_w} after "
            f"{frozen.lecar.ghost_hits} ghost hits; {elapsed:.1f}s")


E2E_TRAIN_SEEDS, E2E_TEST_SEEDS, E2E_LENGTH, E2E_CAPACITY = (1, 2, 3), (11, 12), 100_000, 32


def test_end_to_end_superiority(verdict):
    t0 = time.perf_counter()
    train_traces = [synth_trace("program", E2E_LENGTH, s) for s in E2E_TRAIN_SEEDS]
    tables, _ = pretrain_word2vec(train_traces, Word2VecConfig())
    model = DeapModel.create(ModelDims(), seed=0, tables=tables)
    sets = [make_samples(tr, lru_miss_indices(tr, E2E_CAPACITY), model.dims.kde_window) for tr in train_traces]
    train(model, sets, TrainConfig())
    rates, counters = {}, []
    for s in E2E_TEST_SEEDS:
        rep = run_simulation(synth_trace("program", E2E_LENGTH, s), model, SimConfig(capacity=E2E_CAPACITY))
        for p, r in rep.policies.items():
            rates.setdefault(p, []).append(r.hit_rate)
        x = rep.learned
        counters.append(f"seed {s}: admitted {x['admissions']}, rejected {x['rejections']}, "
                        f"useful prefetches {x['prefetch_useful']}/{x['prefetch_issued']}, "
                        f"weights {np.round(x['final_weights'], 3).tolist()}")
    mean = {p: float(np.mean(v)) for p, v in rates.items()}
    best = max(BASELINE_POLICIES, key=mean.get)
    elapsed = time.perf_counter() - t0
    ok = mean["deap"] >= mean[best] + 0.01 and mean["deap"] <= mean["belady"] + 0.05 and elapsed < 1800
    summary = ", ".join(f"{p} {v:.4f}" for p, v in mean.items())
    verdict("end-to-end superiority", ok,
            f"mean hit rates {summary}; need deap >= {best} + 0.01 = {mean[best] + 0.01:.4f}; "
            f"{'; '.join(counters)}; {elapsed:.0f}s")


FAST = ["word2vec_number_of_epochs=20", "word2vec_encoder_hidden_layer_size=50",
        "word2vec_byte_embedding_dimension=5", "address_embedding_size=5", "lstm_hidden_cell_size=20",
        "prefetching_input_sequence_length=20", "miss_buffer_size=30", "training_batch_size=64",
        "num_epochs=2", "test_simulation_prefetching_interval=10", "rng_seed=3"]


def _cli(*argv):
    args = list(argv)
    for s in FAST:
        args += ["--set", s]
    assert cli_main(args) == 0, argv


def _pipeline(out):
    out.mkdir()
    _cli("synth", "--kind", "program", "--length", "1500", "--seed", "1", "--out", str(out / "train.csv"))
    _cli("synth", "--kind", "program", "--length", "1200", "--seed", "2", "--out", str(out / "test.csv"))
    _cli("pretrain", str(out / "train.csv"), "--out", str(out / "tables.npy"))
    _cli("train", str(out / "train.csv"), "--tables", str(out / "tables.npy"), "--out", str(out / "m.ckpt"))
    _cli("train", str(out / "train.csv"), "--resume", str(out / "m.ckpt"), "--out", str(out / "m2.ckpt"))
    _cli("simulate", str(out / "test.csv"), "--checkpoint", str(out / "m2.ckpt"), "--out-dir", str(out))
    _cli("report", str(out / "test.report.json"), "--out-dir", str(out))
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_determinism(tmp_path, verdict):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = not differing and first.keys() == second.keys()
    verdict("determinism", ok, f"{len(first)} artifacts compared byte for byte, differing: {differing or 'none'}")


def test_kde_correctness(verdict):
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(20):
        pts = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 3.0), size=int(rng.integers(2, 60)))
        h = float(bandwidth_silverman(pts[:, None])[0])
        grid = np.linspace(pts.min() - 12 * h, pts.max() + 12 * h, 40001)
        dens = np.exp(log_kde(pts[:, None], grid[:, None], [h]))
        worst = max(worst, abs(np.trapezoid(dens, grid) - 1.0))
    peak_err = 0.0
    for h in (1e-2, 0.3, 1.0, 7.5):
        x0 = rng.normal()
        expected = 1.0 / (h * np.sqrt(2 * np.pi))
        peak_err = max(peak_err, abs(kde_density([[x0]], [x0], [h]) - expected))
    ok = worst <= 0.02 and peak_err <= 1e-9
    verdict("KDE correctness", ok,
            f"max |integral - 1| {worst:.2e} over 20 windows; single-sample peak error {peak_err:.1e}")
