"""The prefetch / future-frequency / reuse-distance network.

Input embeddings of a window of recent misses feed two consumers: an LSTM
over the last ``seq_len`` of them, whose final state predicts the four bytes
of the next miss, and a KDE summary of the whole window. A decoder maps an
address embedding concatenated with that summary to a predicted future
frequency and reuse distance.

During training the decoder sees the embedding of the *predicted* next miss,
obtained from the byte distributions through a low-temperature softmax, and
is supervised with the labels of the true next miss.

Parameters live in one ordered dict of float64 arrays so the optimizer,
gradient checker and checkpoint code can treat them uniformly.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from .embed import N_BYTES, VOCAB, ByteEmbeddingTables, lookup, lookup_bwd, tokenize_array
from .errors import CheckpointFormatError, ShapeError
from .kde import DEFAULT_FLOOR, distribution_fwd, distribution_bwd
from .nn import (OptimizerState, cross_entropy_logits, dense_bwd, dense_fwd, init_uniform,
                 lstm_sequence_bwd, lstm_sequence_fwd, optimizer_step, softmax, softmax_bwd,
                 soft_argmax_embed)
from .trace import LabeledTrace

log = logging.getLogger(__name__)

MAGIC = b"DEAP1"
TABLE_PARAMS = ("addr_tables", "pc_tables")


@dataclass(frozen=True)
class ModelDims:
    d_byte: int = 20
    d_addr: int = 20
    comb_hidden: int = 128
    lstm_hidden: int = 40
    dec_hidden: int = 10
    kde_probes: int = 16
    seq_len: int = 30
    kde_window: int = 50
    label_scale: float = 1e-4
    kde_floor: float = DEFAULT_FLOOR

    def shapes(self):
        """Parameter shapes in checkpoint order."""
        db, da, ch, H, dh, P = (self.d_byte, self.d_addr, self.comb_hidden,
                                self.lstm_hidden, self.dec_hidden, self.kde_probes)
        out = {
            "addr_tables": (N_BYTES, VOCAB, db),
            "pc_tables": (N_BYTES, VOCAB, db),
        }
        for s in ("addr_comb", "pc_comb"):
            out[f"{s}.W1"] = (ch, N_BYTES * db)
            out[f"{s}.b1"] = (ch,)
            out[f"{s}.W2"] = (da, ch)
            out[f"{s}.b2"] = (da,)
        out["lstm.W"] = (4 * H, H + 2 * da)
        out["lstm.b"] = (4 * H,)
        out["head.W"] = (N_BYTES, VOCAB, H)
        out["head.b"] = (N_BYTES, VOCAB)
        out["dec.W1"] = (dh, da + P)
        out["dec.b1"] = (dh,)
        out["dec.Wf"] = (1, dh)
        out["dec.bf"] = (1,)
        out["dec.Wr"] = (1, dh)
        out["dec.br"] = (1,)
        return out


@dataclass(frozen=True)
class LossWeights:
    w0: float = 0.33
    w1: float = 0.33
    w2: float = 0.33

    def __post_init__(self):
        ws = (self.w0, self.w1, self.w2)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")

    def total(self, lp, lf, lr):
        return self.w0 * lp + self.w1 * lf + self.w2 * lr


class DeapModel:
    def __init__(self, dims, params):
        self.dims = dims
        self.params = params
        self.train_step = 0

    @classmethod
    def create(cls, dims=None, seed=0, tables=None):
        dims = dims or ModelDims()
        rng = np.random.default_rng(seed)
        fan_in = {
            "addr_tables": dims.d_byte, "pc_tables": dims.d_byte,
            "lstm": dims.lstm_hidden + 2 * dims.d_addr, "head": dims.lstm_hidden,
            "dec.W1": dims.d_addr + dims.kde_probes, "dec.b1": dims.d_addr + dims.kde_probes,
        }
        params = {}
        for name, shape in dims.shapes().items():
            prefix = name.split(".")[0]
            if name in fan_in:
                n_in = fan_in[name]
            elif prefix in fan_in:
                n_in = fan_in[prefix]
            elif name.endswith(("W1", "b1")):
                n_in = N_BYTES * dims.d_byte
            elif name.endswith(("W2", "b2")):
                n_in = dims.comb_hidden
            else:
                n_in = dims.dec_hidden
            params[name] = init_uniform(rng, shape, n_in)
        model = cls(dims, params)
        if tables is not None:
            model.set_tables(tables)
        return model

    def set_tables(self, tables):
        if tables.address.shape != self.params["addr_tables"].shape:
            raise ShapeError(f"embedding tables {tables.address.shape} do not match model "
                             f"{self.params['addr_tables'].shape}")
        self.params["addr_tables"][...] = tables.address
        self.params["pc_tables"][...] = tables.pc

    @property
    def tables(self):
        return ByteEmbeddingTables(self.params["addr_tables"], self.params["pc_tables"])

    def copy(self):
        m = DeapModel(self.dims, {k: v.copy() for k, v in self.params.items()})
        m.train_step = self.train_step
        return m

    # -- inference ---------------------------------------------------------

    def embed_values(self, values, stream="addr"):
        """Address-level embeddings for an array of 32-bit values."""
        out, _ = _embed_fwd(self.params, tokenize_array(values), stream)
        return out

    def embed_inputs(self, pcs, addrs):
        return np.concatenate([self.embed_values(addrs, "addr"), self.embed_values(pcs, "pc")], axis=-1)

    def prefetch_from_embeddings(self, e):
        """Byte distributions for the next miss given input embeddings (L, 2*d_addr)."""
        P = self.params
        h, _ = lstm_sequence_fwd(P["lstm.W"], P["lstm.b"], e[None])
        return softmax(_head_logits(P, h)[0])

    def decode_batch(self, A, d):
        """Predicted (future frequency, reuse distance) in trace units for rows of ``A``."""
        P = self.params
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        d = np.asarray(d, dtype=np.float64)
        if A.shape[1] != self.dims.d_addr or d.shape[-1] != self.dims.kde_probes:
            raise ShapeError(f"decoder expects ({self.dims.d_addr}, {self.dims.kde_probes}) inputs, "
                             f"got ({A.shape[1]}, {d.shape[-1]})")
        z = np.concatenate([A, np.broadcast_to(d, (A.shape[0], d.shape[-1]))], axis=1)
        hdec = np.maximum(z @ P["dec.W1"].T + P["dec.b1"], 0.0)
        f = (hdec @ P["dec.Wf"].T + P["dec.bf"])[:, 0]
        r = (hdec @ P["dec.Wr"].T + P["dec.br"])[:, 0]
        return f / self.dims.label_scale, r / self.dims.label_scale


def prefetch_forward(model, pcs, addrs):
    """Four 256-way next-miss byte distributions from a (pc, address) sequence."""
    pcs = np.asarray(pcs, dtype=np.int64).reshape(-1)
    addrs = np.asarray(addrs, dtype=np.int64).reshape(-1)
    if addrs.size == 0 or pcs.size != addrs.size:
        raise ShapeError("prefetch_forward needs a non-empty sequence of (pc, address) pairs")
    return model.prefetch_from_embeddings(model.embed_inputs(pcs, addrs))


def decode_future(model, a, d):
    f, r = model.decode_batch(np.asarray(a)[None, :], d)
    return float(f[0]), float(r[0])


# --------------------------------------------------------------------------
# forward / backward over a training batch

def _head_logits(P, h):
    W = P["head.W"]
    return (h @ W.reshape(-1, W.shape[-1]).T).reshape(h.shape[0], *W.shape[:2]) + P["head.b"]


def _embed_fwd(P, byte_idx, stream):
    x = lookup(P[f"{stream}_tables"], byte_idx)
    out, cache = _combine_fwd(x, P, f"{stream}_comb")
    return out, (x, cache)


def _combine_fwd(x, P, prefix):
    h, c1 = dense_fwd(x, P[f"{prefix}.W1"], P[f"{prefix}.b1"], "relu")
    out, c2 = dense_fwd(h, P[f"{prefix}.W2"], P[f"{prefix}.b2"], "identity")
    return out, (c1, c2)


def _combine_bwd(dout, cache, prefix, grads):
    c1, c2 = cache
    dh, dW2, db2 = dense_bwd(dout, c2)
    dx, dW1, db1 = dense_bwd(dh, c1)
    for k, g in (("W1", dW1), ("b1", db1), ("W2", dW2), ("b2", db2)):
        key = f"{prefix}.{k}"
        grads[key] = grads[key] + g if key in grads else g
    return dx


def _embed_unique(P, values, stream):
    uniq, inv = np.unique(values, return_inverse=True)
    b = tokenize_array(uniq)
    x = lookup(P[f"{stream}_tables"], b)
    out, cache = _combine_fwd(x, P, f"{stream}_comb")
    return out[inv.reshape(values.shape)], (uniq, inv.reshape(-1), b, cache)


def _embed_unique_bwd(dout, cache, P, stream, grads):
    uniq, inv, b, ccache = cache
    du = np.zeros((uniq.shape[0], dout.shape[-1]))
    np.add.at(du, inv, dout.reshape(-1, dout.shape[-1]))
    dx = _combine_bwd(du, ccache, f"{stream}_comb", grads)
    key = f"{stream}_tables"
    g = lookup_bwd(dx, b, P[key].shape)
    grads[key] = grads[key] + g if key in grads else g


@dataclass
class TrainBatch:
    window_pcs: np.ndarray  # (B, K)
    window_addrs: np.ndarray  # (B, K)
    target_addrs: np.ndarray  # (B,)
    freq: np.ndarray  # (B,)
    reuse: np.ndarray  # (B,)

    def __len__(self):
        return self.window_addrs.shape[0]

    @staticmethod
    def concat(batches):
        if len(batches) == 1:
            return batches[0]
        names = [f.name for f in fields(TrainBatch)]
        return TrainBatch(*(np.concatenate([getattr(b, n) for b in batches]) for n in names))


@dataclass
class Losses:
    prefetching: float
    frequency: float
    recency: float
    total: float

    def as_tuple(self):
        return (self.prefetching, self.frequency, self.recency, self.total)


def forward_backward(model, batch, weights=LossWeights(), temperature=1e-3, backward=True):
    """Losses for ``batch`` and, with ``backward``, their gradients w.r.t. every parameter."""
    P, dims = model.params, model.dims
    B, K = batch.window_addrs.shape
    if not (batch.target_addrs.shape[0] == batch.freq.shape[0] == batch.reuse.shape[0] == B):
        raise ShapeError("labels and batch size disagree")
    L = min(dims.seq_len, K)
    da = dims.d_addr

    a, ca = _embed_unique(P, batch.window_addrs, "addr")
    p, cp = _embed_unique(P, batch.window_pcs, "pc")
    e = np.concatenate([a, p], axis=2)

    hL, cl = lstm_sequence_fwd(P["lstm.W"], P["lstm.b"], e[:, K - L:, :])
    logits = _head_logits(P, hL)
    tb = tokenize_array(batch.target_addrs)
    ce, dce = cross_entropy_logits(logits.reshape(B * N_BYTES, VOCAB), tb.reshape(-1))
    lp = float(ce.sum() / B)

    q = softmax(logits, temperature)
    s = soft_argmax_embed(q, P["addr_tables"]).reshape(B, -1)
    a_soft, cs = _combine_fwd(s, P, "addr_comb")
    d, ck = distribution_fwd(e, dims.kde_probes, dims.kde_floor)
    z = np.concatenate([a_soft, d], axis=1)
    hdec, cd = dense_fwd(z, P["dec.W1"], P["dec.b1"], "relu")
    fh = hdec @ P["dec.Wf"].T + P["dec.bf"]
    rh = hdec @ P["dec.Wr"].T + P["dec.br"]
    ft = dims.label_scale * np.asarray(batch.freq, dtype=np.float64)[:, None]
    rt = dims.label_scale * np.asarray(batch.reuse, dtype=np.float64)[:, None]
    lf = float(((fh - ft) ** 2).mean())
    lr = float(((rh - rt) ** 2).mean())
    losses = Losses(lp, lf, lr, weights.total(lp, lf, lr))
    if not backward:
        return losses, None

    grads = {}
    dfh = weights.w1 * 2.0 * (fh - ft) / B
    drh = weights.w2 * 2.0 * (rh - rt) / B
    grads["dec.Wf"] = dfh.T @ hdec
    grads["dec.bf"] = dfh.sum(axis=0)
    grads["dec.Wr"] = drh.T @ hdec
    grads["dec.br"] = drh.sum(axis=0)
    dhdec = dfh @ P["dec.Wf"] + drh @ P["dec.Wr"]
    dz, grads["dec.W1"], grads["dec.b1"] = dense_bwd(dhdec, cd)
    de = distribution_bwd(dz[:, da:], ck)

    ds = _combine_bwd(dz[:, :da], cs, "addr_comb", grads).reshape(B, N_BYTES, -1)
    ds_j = ds.transpose(1, 0, 2)  # (4, B, d)
    dq = np.matmul(ds_j, P["addr_tables"].transpose(0, 2, 1)).transpose(1, 0, 2)
    grads["addr_tables"] = np.matmul(q.transpose(1, 2, 0), ds_j)
    dlogits = softmax_bwd(dq, q, temperature) + weights.w0 * dce.reshape(B, N_BYTES, VOCAB) / B
    dflat = dlogits.reshape(B, -1)
    grads["head.W"] = (dflat.T @ hL).reshape(P["head.W"].shape)
    grads["head.b"] = dlogits.sum(axis=0)
    dhL = dflat @ P["head.W"].reshape(-1, hL.shape[1])
    dxs, grads["lstm.W"], grads["lstm.b"] = lstm_sequence_bwd(dhL, cl)
    de[:, K - L:, :] += dxs

    _embed_unique_bwd(de[..., :da], ca, P, "addr", grads)
    _embed_unique_bwd(de[..., da:], cp, P, "pc", grads)
    return losses, grads


def training_step(model, batch, weights, optimizer, temperature=1e-3, freeze_byte_tables=False):
    losses, grads = forward_backward(model, batch, weights, temperature)
    if freeze_byte_tables:
        for k in TABLE_PARAMS:
            grads.pop(k, None)
    optimizer_step(optimizer, model.params, grads)
    model.train_step += 1
    return losses


# --------------------------------------------------------------------------
# training data

@dataclass
class SampleSet:
    """Training samples as index windows into a labelled trace."""

    trace: LabeledTrace
    windows: np.ndarray  # (N, K) trace indices of the miss window
    targets: np.ndarray  # (N,) trace index of the next miss

    def __len__(self):
        return self.targets.shape[0]

    def batch(self, rows):
        w = self.windows[rows]
        t = self.targets[rows]
        tr = self.trace
        return TrainBatch(tr.pcs[w], tr.addresses[w], tr.addresses[t],
                          tr.future_frequency[t], tr.reuse_distance[t])

    @staticmethod
    def concat(sets):
        # only valid for sets over the same trace object
        return SampleSet(sets[0].trace, np.concatenate([s.windows for s in sets]),
                         np.concatenate([s.targets for s in sets]))


def lru_miss_indices(trace, capacity):
    """Trace positions that miss in a demand-fetch LRU cache of ``capacity`` lines."""
    from collections import OrderedDict
    cache = OrderedDict()
    misses = []
    for i, a in enumerate(trace.addresses.tolist()):
        if a in cache:
            cache.move_to_end(a)
            continue
        misses.append(i)
        if len(cache) >= capacity:
            cache.popitem(last=False)
        cache[a] = None
    return np.array(misses, dtype=np.int64)


def make_samples(trace, miss_indices, window):
    """One sample per miss with ``window`` predecessors: inputs ``m-window+1..m``, target ``m+1``."""
    miss_indices = np.asarray(miss_indices, dtype=np.int64)
    n = miss_indices.shape[0]
    if n <= window:
        return SampleSet(trace, np.empty((0, window), dtype=np.int64), np.empty(0, dtype=np.int64))
    ends = np.arange(window - 1, n - 1)
    windows = miss_indices[ends[:, None] - np.arange(window - 1, -1, -1)[None, :]]
    return SampleSet(trace, windows, miss_indices[ends + 1])


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    optimizer: str = "adam"
    temperature: float = 1e-3
    weights: LossWeights = LossWeights()
    freeze_byte_tables: bool = False
    seed: int = 0


def train(model, sample_sets, cfg, optimizer=None, on_epoch=None):
    """Mini-batch training over one or more :class:`SampleSet`.

    Returns ``(per-epoch mean losses, per-step losses, optimizer)``.
    """
    if isinstance(sample_sets, SampleSet):
        sample_sets = [sample_sets]
    sample_sets = [s for s in sample_sets if len(s)]
    optimizer = optimizer or OptimizerState(cfg.optimizer, cfg.lr)
    rng = np.random.default_rng(cfg.seed + model.train_step)
    keys = np.concatenate([np.stack([np.full(len(s), i), np.arange(len(s))], axis=1)
                           for i, s in enumerate(sample_sets)]) if sample_sets else np.empty((0, 2), int)
    curve, steps = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(keys.shape[0])
        sums = np.zeros(4)
        count = 0
        for start in range(0, keys.shape[0], cfg.batch_size):
            sel = keys[order[start:start + cfg.batch_size]]
            parts = [s.batch(sel[sel[:, 0] == i, 1]) for i, s in enumerate(sample_sets)]
            batch = TrainBatch.concat([b for b in parts if len(b)])
            losses = training_step(model, batch, cfg.weights, optimizer,
                                   cfg.temperature, cfg.freeze_byte_tables)
            steps.append(losses.as_tuple())
            sums += np.array(losses.as_tuple()) * len(batch)
            count += len(batch)
        mean = tuple(float(x) for x in sums / max(count, 1))
        curve.append(mean)
        log.info("epoch %d  L_p=%.4f L_f=%.4f L_r=%.4f L_total=%.4f", epoch, *mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return curve, steps, optimizer


def byte_accuracy(model, sample_set, batch_size=512):
    """Per-head top-1 accuracy of the next-miss byte predictions."""
    hits = np.zeros(N_BYTES)
    n = len(sample_set)
    for start in range(0, n, batch_size):
        b = sample_set.batch(np.arange(start, min(n, start + batch_size)))
        P = model.params
        e = model.embed_inputs(b.window_pcs, b.window_addrs)
        L = min(model.dims.seq_len, e.shape[1])
        h, _ = lstm_sequence_fwd(P["lstm.W"], P["lstm.b"], e[:, -L:, :])
        logits = _head_logits(P, h)
        hits += (logits.argmax(axis=2) == tokenize_array(b.target_addrs)).sum(axis=0)
    return hits / max(n, 1)


# --------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   "DEAP1"
#   u32 n_fields, then per field: u8 len, name, u8 kind ('i'|'f'), 8-byte value
#   u64 train_step
#   u32 n_arrays, then per array: u8 len, name, u8 ndim, u32 dims..., float64 data
#   u8 has_optimizer; if 1: u8 len, algorithm, f64 lr, f64 weight_decay, u64 step,
#       then the first and second moment arrays in parameter order

def _pack_str(s):
    b = s.encode("ascii")
    return struct.pack("<B", len(b)) + b


def _pack_array(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return (_pack_str(name) + struct.pack("<B", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())


def save_checkpoint(model, path, optimizer=None):
    out = bytearray(MAGIC)
    dims = asdict(model.dims)
    out += struct.pack("<I", len(dims))
    for name, value in dims.items():
        out += _pack_str(name)
        if isinstance(value, float):
            out += b"f" + struct.pack("<d", value)
        else:
            out += b"i" + struct.pack("<q", value)
    out += struct.pack("<Q", model.train_step)
    out += struct.pack("<I", len(model.params))
    for name, arr in model.params.items():
        out += _pack_array(name, arr)
    if optimizer is not None and optimizer.step > 0:
        out += struct.pack("<B", 1) + _pack_str(optimizer.algorithm)
        out += struct.pack("<ddQ", optimizer.lr, optimizer.weight_decay, optimizer.step)
        for moments in (optimizer.m, optimizer.v):
            for name, arr in model.params.items():
                out += _pack_array(name, moments.get(name, np.zeros_like(arr)))
    else:
        out += struct.pack("<B", 0)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<B")
        return self.take(n).decode("ascii")

    def array(self):
        name = self.string()
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        return name, arr


def load_checkpoint(path, expected_dims=None, with_optimizer=False):
    """Read a checkpoint; optionally validate against ``expected_dims``.

    Returns the model, or ``(model, optimizer_or_None)`` with ``with_optimizer``.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("bad magic: not a DEAP1 checkpoint")
    (n_fields,) = r.unpack("<I")
    header = {}
    for _ in range(n_fields):
        name = r.string()
        kind = r.take(1)
        if kind == b"f":
            (header[name],) = r.unpack("<d")
        elif kind == b"i":
            (header[name],) = r.unpack("<q")
        else:
            raise CheckpointFormatError(f"unknown header field kind {kind!r}")
    known = {f.name for f in fields(ModelDims)}
    if set(header) != known:
        raise CheckpointFormatError(f"header fields {sorted(header)} do not match {sorted(known)}")
    dims = ModelDims(**header)
    if expected_dims is not None:
        for f in fields(ModelDims):
            if getattr(dims, f.name) != getattr(expected_dims, f.name):
                raise CheckpointFormatError(
                    f"dimension mismatch in field {f.name!r}: checkpoint has "
                    f"{getattr(dims, f.name)}, config expects {getattr(expected_dims, f.name)}")
    (train_step,) = r.unpack("<Q")
    (n_arrays,) = r.unpack("<I")
    shapes = dims.shapes()
    if n_arrays != len(shapes):
        raise CheckpointFormatError(f"expected {len(shapes)} parameter arrays, found {n_arrays}")
    params = {}
    for expected_name, shape in shapes.items():
        name, arr = r.array()
        if name != expected_name or arr.shape != shape:
            raise CheckpointFormatError(
                f"parameter {name!r}{arr.shape} does not match expected {expected_name!r}{shape}")
        params[name] = arr
    optimizer = None
    (has_opt,) = r.unpack("<B")
    if has_opt:
        algo = r.string()
        lr, wd, step = r.unpack("<ddQ")
        optimizer = OptimizerState(algo, lr, wd, step=step)
        for moments in (optimizer.m, optimizer.v):
            for expected_name in shapes:
                name, arr = r.array()
                if name != expected_name:
                    raise CheckpointFormatError(f"optimizer state for {name!r} out of order")
                moments[name] = arr
    if r.pos != len(r.data):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    model = DeapModel(dims, params)
    model.train_step = train_step
    return (model, optimizer) if with_optimizer else model
