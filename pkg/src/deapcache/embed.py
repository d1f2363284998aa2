"""Byte-level address/PC embeddings.

32-bit values are split big-endian into four bytes. Each byte position has its
own 256-row table; a small MLP (the combiner) maps the four concatenated byte
vectors to one address-level vector. Tables are initialised by a CBOW
word2vec model trained on the byte stream of a trace.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import (DenseLayer, OptimizerState, cross_entropy_logits, dense_fwd,
                 init_uniform, optimizer_step)

log = logging.getLogger(__name__)

N_BYTES = 4
VOCAB = 256


def tokenize(value):
    value = int(value) & 0xFFFFFFFF
    return ((value >> 24) & 0xFF, (value >> 16) & 0xFF, (value >> 8) & 0xFF, value & 0xFF)


def recompose(byte_tuple):
    b1, b2, b3, b4 = (int(b) for b in byte_tuple)
    return (b1 << 24) | (b2 << 16) | (b3 << 8) | b4


def tokenize_array(values):
    """Vectorised :func:`tokenize`: (...,) integers -> (..., 4) bytes."""
    v = np.asarray(values, dtype=np.int64)
    shifts = np.array([24, 16, 8, 0], dtype=np.int64)
    return ((v[..., None] >> shifts) & 0xFF).astype(np.int64)


@dataclass
class ByteEmbeddingTables:
    address: np.ndarray  # (4, 256, d_byte)
    pc: np.ndarray  # (4, 256, d_byte)

    @property
    def dim(self):
        return self.address.shape[-1]

    @classmethod
    def random(cls, dim, rng):
        return cls(init_uniform(rng, (N_BYTES, VOCAB, dim), dim),
                   init_uniform(rng, (N_BYTES, VOCAB, dim), dim))

    @classmethod
    def from_shared(cls, address_table, pc_table):
        """Copy one 256-row table per stream into all four byte positions."""
        return cls(np.repeat(address_table[None], N_BYTES, axis=0).copy(),
                   np.repeat(pc_table[None], N_BYTES, axis=0).copy())

    def save(self, path):
        # a plain .npy of the stacked pair; npz archives embed timestamps
        with open(path, "wb") as fh:
            np.save(fh, np.stack([self.address, self.pc]).astype("<f8"), allow_pickle=False)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = np.load(fh, allow_pickle=False)
        if data.ndim != 4 or data.shape[:3] != (2, N_BYTES, VOCAB):
            raise ShapeError(f"embedding tables file has shape {data.shape}, expected (2, 4, 256, d)")
        return cls(data[0].astype(np.float64), data[1].astype(np.float64))


@dataclass
class CombinerMlp:
    hidden: DenseLayer  # 4*d_byte -> hidden, relu
    out: DenseLayer  # hidden -> d_addr, identity

    @classmethod
    def create(cls, d_byte, d_addr, rng, hidden=128):
        return cls(DenseLayer.create(N_BYTES * d_byte, hidden, rng, "relu"),
                   DenseLayer.create(hidden, d_addr, rng, "identity"))

    @property
    def out_dim(self):
        return self.out.out_dim

    def __call__(self, x):
        return self.out(self.hidden(x))


def lookup(tables, byte_idx):
    """Concatenate per-position rows: (..., 4) byte indices -> (..., 4*d)."""
    rows = tables[np.arange(N_BYTES), byte_idx]  # (..., 4, d)
    return rows.reshape(*byte_idx.shape[:-1], -1)


def lookup_bwd(dvec, byte_idx, table_shape):
    n_pos, vocab, d = table_shape
    grad = np.zeros(table_shape)
    dv = dvec.reshape(-1, n_pos, d)
    idx = byte_idx.reshape(-1, n_pos)
    for j in range(n_pos):
        np.add.at(grad[j], idx[:, j], dv[:, j, :])
    return grad


def embed_address(value, tables, combiner):
    """Address-level embedding of one 32-bit value.

    ``tables`` is the (4, 256, d) stack for the value's stream.
    """
    return combiner(lookup(tables, np.array(tokenize(value))))


def embed_step(record, tables, combiners):
    """Input embedding of one access: address embedding then PC embedding."""
    addr_comb, pc_comb = combiners
    a = embed_address(record.address, tables.address, addr_comb)
    p = embed_address(record.pc, tables.pc, pc_comb)
    return np.concatenate([a, p])


# --------------------------------------------------------------------------
# word2vec (CBOW with one hidden layer and a full 256-way softmax)

@dataclass
class Word2VecConfig:
    epochs: int = 120
    lr: float = 3e-3
    weight_decay: float = 1e-3
    optimizer: str = "adam"
    hidden: int = 128
    dim: int = 20
    context: int = 4
    batch_size: int = 256
    seed: int = 0


def byte_stream(values):
    return tokenize_array(values).reshape(-1)


def cbow_examples(stream, context):
    """Unique (context, center) pairs with multiplicities.

    Contexts hold ``context // 2`` bytes on the left and the rest on the right;
    positions falling outside the stream are marked -1 and ignored (no padding
    token). Returns ``(ctx, center, counts)``.
    """
    stream = np.asarray(stream, dtype=np.int64)
    n = stream.shape[0]
    left = context // 2
    offsets = [o for o in range(-left, context - left + 1) if o != 0]
    pos = np.arange(n)
    cols = []
    for o in offsets:
        j = pos + o
        valid = (j >= 0) & (j < n)
        cols.append(np.where(valid, stream[np.clip(j, 0, n - 1)], -1))
    ctx = np.stack(cols, axis=1) if cols else np.empty((n, 0), dtype=np.int64)
    rows = np.concatenate([ctx, stream[:, None]], axis=1)
    rows = rows[(ctx >= 0).any(axis=1)]
    if rows.shape[0] == 0:
        return np.empty((0, len(offsets)), dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0)
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    return uniq[:, :-1], uniq[:, -1], counts.astype(np.float64)


def _cbow_batch(params, ctx, center, weight):
    E, W1, b1, W2, b2 = (params[k] for k in ("E", "W1", "b1", "W2", "b2"))
    mask = (ctx >= 0).astype(np.float64)
    cnt = mask.sum(axis=1, keepdims=True)
    safe = np.where(ctx >= 0, ctx, 0)
    avg = (E[safe] * mask[..., None]).sum(axis=1) / cnt
    h, hc = dense_fwd(avg, W1, b1, "relu")
    logits = h @ W2.T + b2
    ce, dlogits = cross_entropy_logits(logits, center)
    loss = float((weight * ce).sum())
    dlogits *= weight[:, None]
    grads = {"W2": dlogits.T @ h, "b2": dlogits.sum(axis=0)}
    dh = dlogits @ W2
    dpre = dh * (hc[2] > 0)
    grads["W1"] = dpre.T @ avg
    grads["b1"] = dpre.sum(axis=0)
    davg = dpre @ W1 / cnt
    dE = np.zeros_like(E)
    contrib = davg[:, None, :] * mask[..., None]
    np.add.at(dE, safe.reshape(-1), contrib.reshape(-1, E.shape[1]))
    grads["E"] = dE
    return loss, grads


def train_cbow(stream, cfg, rng):
    """Train one CBOW model on a byte stream; return (embedding table, per-epoch loss)."""
    ctx, center, counts = cbow_examples(stream, cfg.context)
    params = {
        "E": init_uniform(rng, (VOCAB, cfg.dim), cfg.dim),
        "W1": init_uniform(rng, (cfg.hidden, cfg.dim), cfg.dim),
        "b1": init_uniform(rng, (cfg.hidden,), cfg.dim),
        "W2": init_uniform(rng, (VOCAB, cfg.hidden), cfg.hidden),
        "b2": init_uniform(rng, (VOCAB,), cfg.hidden),
    }
    opt = OptimizerState(cfg.optimizer, cfg.lr, cfg.weight_decay)
    total = counts.sum()
    losses = []
    m = ctx.shape[0]
    if m == 0:
        return params["E"], losses
    for epoch in range(cfg.epochs):
        order = rng.permutation(m)
        epoch_loss = 0.0
        for start in range(0, m, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            # scale so that batch losses sum to the corpus mean over an epoch
            weight = counts[b] / total
            loss, grads = _cbow_batch(params, ctx[b], center[b], weight * (m / len(b)))
            epoch_loss += loss * len(b) / m
            optimizer_step(opt, params, grads)
        losses.append(epoch_loss)
        log.debug("word2vec epoch %d loss %.5f", epoch, epoch_loss)
    return params["E"], losses


def pretrain_word2vec(trace, cfg=None):
    """Pretrain address and PC byte tables on ``trace`` (or a list of traces).

    Returns ``(ByteEmbeddingTables, {"address": losses, "pc": losses})``.
    """
    cfg = cfg or Word2VecConfig()
    traces = trace if isinstance(trace, (list, tuple)) else [trace]
    if sum(len(t) for t in traces) == 0:
        raise ConfigError("word2vec pretraining needs a non-empty trace")
    rng = np.random.default_rng(cfg.seed)
    tables, logs = {}, {}
    for stream_name, column in (("address", "addresses"), ("pc", "pcs")):
        stream = np.concatenate([byte_stream(getattr(t, column)) for t in traces])
        table, losses = train_cbow(stream, cfg, rng)
        tables[stream_name] = table
        logs[stream_name] = losses
    return ByteEmbeddingTables.from_shared(tables["address"], tables["pc"]), logs
