"""Diagonal Gaussian kernel density estimates over a sliding embedding window.

The distribution vector summarising a window is the log-density evaluated at
a fixed set of probe points taken from the window itself. A differentiable
batched version is provided for training.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

SILVERMAN = 1.06
DEFAULT_FLOOR = 1e-2
LOG_2PI = np.log(2.0 * np.pi)


def _as_points(points):
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


def bandwidth_silverman(points, floor=DEFAULT_FLOOR):
    """Per-dimension bandwidth ``max(floor, 1.06 * std * n**(-1/5))``."""
    x = _as_points(points)
    n = x.shape[0]
    if n == 0:
        raise ValueError("bandwidth of an empty window")
    sigma = x.std(axis=0, ddof=1) if n > 1 else np.zeros(x.shape[1])
    return np.maximum(floor, SILVERMAN * sigma * n ** -0.2)


def log_kde(points, queries, bandwidth):
    """Log-density of the product-kernel KDE at each row of ``queries``."""
    x = _as_points(points)
    q = _as_points(queries)
    if q.shape[1] != x.shape[1]:
        raise ShapeError(f"query dimension {q.shape[1]} does not match window dimension {x.shape[1]}")
    h = np.asarray(bandwidth, dtype=np.float64)
    u = (q[:, None, :] - x[None, :, :]) / h
    e = -0.5 * (u * u).sum(axis=2)
    top = e.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(e - top).sum(axis=1))
    return lse - np.log(x.shape[0]) - np.log(h).sum() - 0.5 * x.shape[1] * LOG_2PI


def kde_density(points, query, bandwidth=None, floor=DEFAULT_FLOOR):
    x = _as_points(points)
    q = np.atleast_1d(np.asarray(query, dtype=np.float64))
    if bandwidth is None:
        bandwidth = bandwidth_silverman(x, floor)
    return float(np.exp(log_kde(x, q[None, :], bandwidth)[0]))


def probe_indices(n, n_probes):
    return (np.arange(n_probes) * n) // n_probes


@dataclass
class DistributionVector:
    values: np.ndarray
    cold_start: bool = False


class KdeWindow:
    """Ring buffer of the most recent ``capacity`` embeddings."""

    def __init__(self, capacity, floor=DEFAULT_FLOOR):
        self.capacity = capacity
        self.floor = floor
        self._buf = deque(maxlen=capacity)

    def push(self, embedding):
        self._buf.append(np.asarray(embedding, dtype=np.float64))

    def __len__(self):
        return len(self._buf)

    def array(self):
        return np.stack(self._buf) if self._buf else np.empty((0, 0))

    def bandwidth(self):
        return bandwidth_silverman(self.array(), self.floor)


def distribution_vector(window, n_probes=16, floor=DEFAULT_FLOOR):
    """Log-densities at ``n_probes`` window points; zeros and a cold-start flag if empty."""
    if isinstance(window, KdeWindow):
        floor = window.floor
        window = window.array()
    x = np.asarray(window, dtype=np.float64)
    if x.size == 0:
        return DistributionVector(np.zeros(n_probes), cold_start=True)
    x = _as_points(x)
    h = bandwidth_silverman(x, floor)
    probes = x[probe_indices(x.shape[0], n_probes)]
    return DistributionVector(log_kde(x, probes, h))


# --------------------------------------------------------------------------
# batched, differentiable version: X (B, K, D) -> d (B, P)

def distribution_fwd(X, n_probes, floor=DEFAULT_FLOOR):
    B, K, D = X.shape
    idx = probe_indices(K, n_probes)
    mean = X.mean(axis=1, keepdims=True)
    dev = X - mean
    if K > 1:
        sigma = np.sqrt((dev * dev).sum(axis=1) / (K - 1))
    else:
        sigma = np.zeros((B, D))
    scale = SILVERMAN * K ** -0.2
    raw = scale * sigma
    active = raw > floor
    h = np.where(active, raw, floor)  # (B, D)

    # centred before scaling to limit cancellation in the expanded distances
    xs = dev / h[:, None, :]
    qs = xs[:, idx, :]
    sq = (qs * qs).sum(axis=2)[:, :, None] + (xs * xs).sum(axis=2)[:, None, :] \
        - 2.0 * np.matmul(qs, xs.transpose(0, 2, 1))
    E = -0.5 * sq
    top = E.max(axis=2, keepdims=True)
    ex = np.exp(E - top)
    tot = ex.sum(axis=2, keepdims=True)
    W = ex / tot
    lse = top[..., 0] + np.log(tot[..., 0])
    out = lse - np.log(K) - np.log(h).sum(axis=1, keepdims=True) - 0.5 * D * LOG_2PI
    cache = (X, idx, dev, sigma, active, h, xs, qs, W, scale)
    return out, cache


def distribution_bwd(dout, cache):
    X, idx, dev, sigma, active, h, xs, qs, W, scale = cache
    B, K, D = X.shape
    dE = dout[..., None] * W  # (B, P, K)
    dS = -0.5 * dE
    dqs = 2.0 * dS.sum(axis=2)[..., None] * qs - 2.0 * np.matmul(dS, xs)
    dxs = 2.0 * dS.sum(axis=1)[..., None] * xs - 2.0 * np.matmul(dS.transpose(0, 2, 1), qs)
    # probes are gathered from xs
    np.add.at(dxs, (slice(None), idx, slice(None)), dqs)
    ddev = dxs / h[:, None, :]
    dX = ddev - ddev.mean(axis=1, keepdims=True)
    dh = -(dxs * xs).sum(axis=1) / h - dout.sum(axis=1, keepdims=True) / h
    if K > 1:
        dsigma = np.where(active, dh * scale, 0.0)
        safe = np.where(sigma > 0, sigma, 1.0)
        dX += dev * (dsigma / ((K - 1) * safe))[:, None, :]
    return dX
