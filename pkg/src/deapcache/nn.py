"""Small numpy neural-network core with hand-written backward passes.

Everything runs in float64. Batched helpers return a ``cache`` tuple from the
forward pass that the matching backward function consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

CE_EPS = 1e-12
LOG_CE_EPS = np.log(CE_EPS)


def init_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activate(pre, activation):
    if activation == "identity":
        return pre
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "tanh":
        return np.tanh(pre)
    raise ValueError(f"unknown activation {activation!r}")


# --------------------------------------------------------------------------
# dense layers

@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    @classmethod
    def create(cls, in_dim, out_dim, rng, activation="identity"):
        return cls(init_uniform(rng, (out_dim, in_dim), in_dim),
                   init_uniform(rng, (out_dim,), in_dim), activation)

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return dense_forward(self, x)


def dense_forward(layer, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"dense layer expects input dim {layer.in_dim}, got {x.shape[-1]}")
    return _activate(x @ layer.weight.T + layer.bias, layer.activation)


def dense_fwd(x, weight, bias, activation="identity"):
    pre = x @ weight.T + bias
    out = _activate(pre, activation)
    return out, (x, weight, pre, out, activation)


def dense_bwd(dout, cache):
    x, weight, pre, out, activation = cache
    if activation == "relu":
        dpre = dout * (pre > 0)
    elif activation == "tanh":
        dpre = dout * (1.0 - out * out)
    else:
        dpre = dout
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dpre.reshape(-1, dpre.shape[-1])
    dweight = d2.T @ x2
    dbias = d2.sum(axis=0)
    dx = dpre @ weight
    return dx, dweight, dbias


# --------------------------------------------------------------------------
# LSTM

@dataclass
class LstmCell:
    """Gate weights stacked as rows [input; forget; output; candidate].

    Each gate block is (H, H + input_dim) acting on ``[h_prev, x]``.
    """

    weight: np.ndarray  # (4H, H + I)
    bias: np.ndarray  # (4H,)

    @classmethod
    def create(cls, input_dim, hidden, rng):
        fan_in = hidden + input_dim
        return cls(init_uniform(rng, (4 * hidden, fan_in), fan_in),
                   init_uniform(rng, (4 * hidden,), fan_in))

    @property
    def hidden_size(self):
        return self.weight.shape[0] // 4

    @property
    def input_dim(self):
        return self.weight.shape[1] - self.hidden_size

    def gate(self, name):
        k = "ifog".index(name[0])
        H = self.hidden_size
        return self.weight[k * H:(k + 1) * H], self.bias[k * H:(k + 1) * H]


def lstm_step(cell, x, h_prev, c_prev):
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    H = cell.hidden_size
    if x.shape[-1] != cell.input_dim or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError(f"lstm_step shapes x={x.shape} h={h_prev.shape} c={c_prev.shape} "
                         f"do not match H={H}, input={cell.input_dim}")
    z = np.concatenate([h_prev, x], axis=-1)
    a = z @ cell.weight.T + cell.bias
    i = sigmoid(a[..., :H])
    f = sigmoid(a[..., H:2 * H])
    o = sigmoid(a[..., 2 * H:3 * H])
    g = np.tanh(a[..., 3 * H:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def lstm_sequence_fwd(weight, bias, xs):
    """Run the cell over ``xs`` (B, L, I) from a zero state; return last hidden state."""
    B, L, _ = xs.shape
    H = weight.shape[0] // 4
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    steps = []
    for t in range(L):
        z = np.concatenate([h, xs[:, t, :]], axis=1)
        a = z @ weight.T + bias
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H:2 * H])
        o = sigmoid(a[:, 2 * H:3 * H])
        g = np.tanh(a[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        steps.append((z, i, f, o, g, c, tc))
        c = c_new
        h = o * tc
    return h, (weight, steps, xs.shape)


def lstm_sequence_bwd(dh_last, cache):
    weight, steps, shape = cache
    B, L, I = shape
    H = weight.shape[0] // 4
    dweight = np.zeros_like(weight)
    dbias = np.zeros(weight.shape[0])
    dxs = np.zeros(shape)
    dh = dh_last
    dc = np.zeros((B, H))
    for t in range(L - 1, -1, -1):
        z, i, f, o, g, c_prev, tc = steps[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        da = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            do * o * (1.0 - o),
            dc * i * (1.0 - g * g),
        ], axis=1)
        dweight += da.T @ z
        dbias += da.sum(axis=0)
        dz = da @ weight
        dh = dz[:, :H]
        dxs[:, t, :] = dz[:, H:]
        dc = dc * f
    return dxs, dweight, dbias


# --------------------------------------------------------------------------
# probabilities and losses

def softmax(logits, temperature=1.0, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax received non-finite logits")
    z = logits / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(dp, p, temperature=1.0, axis=-1):
    """Gradient w.r.t. logits of ``p = softmax(logits / temperature)``."""
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True)) / temperature


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(pred, target_class):
    return float(-np.log(max(float(pred[target_class]), CE_EPS)))


def cross_entropy_logits(logits, targets):
    """Per-row clamped cross-entropy from logits and its gradient w.r.t. logits."""
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    picked = logp[rows, targets]
    clamped = picked < LOG_CE_EPS
    loss = -np.where(clamped, LOG_CE_EPS, picked)
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    grad[clamped] = 0.0
    return loss, grad


def mse(pred, target):
    d = float(pred) - float(target)
    return d * d


def soft_argmax_embed(byte_probs, tables):
    """Probability-weighted table rows per byte position.

    ``byte_probs`` (..., 4, 256) and ``tables`` (4, 256, d) give (..., 4, d).
    """
    byte_probs = np.asarray(byte_probs, dtype=np.float64)
    lead = byte_probs.shape[:-2]
    p = byte_probs.reshape(-1, *byte_probs.shape[-2:]).transpose(1, 0, 2)  # (4, N, 256)
    out = np.matmul(p, tables).transpose(1, 0, 2)
    return out.reshape(*lead, *out.shape[-2:])


# --------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.algorithm not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")


def optimizer_step(state, params, grads):
    """Update ``params`` in place for every name present in ``grads``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter group {name!r}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        if state.algorithm == "sgd":
            p -= state.lr * g
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# --------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    per_param: dict
    checked: int
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def grad_check(loss_fn, params, tolerance=1e-4, step=1e-5, max_coords=None, seed=0, floor=1e-5):
    """Compare analytic gradients with central finite differences.

    ``loss_fn(params)`` returns ``(loss, grads)``. With ``max_coords`` set, a
    seeded random subset of coordinates is checked per parameter array.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    finite-difference rounding noise on near-zero gradients from dominating.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(params)
    per_param = {}
    worst, worst_err, checked = "", 0.0, 0
    for name, p in params.items():
        if name not in grads:
            continue
        flat = p.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        err_max = 0.0
        for k in idx:
            old = flat[k]
            flat[k] = old + step
            lp = float(loss_fn(params)[0])
            flat[k] = old - step
            lm = float(loss_fn(params)[0])
            flat[k] = old
            num = (lp - lm) / (2.0 * step)
            ana = float(g[k])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            err_max = max(err_max, err)
        checked += len(idx)
        per_param[name] = err_max
        if err_max >= worst_err:
            worst, worst_err = name, err_max
    return GradCheckReport(worst_err, worst, per_param, checked, tolerance)
