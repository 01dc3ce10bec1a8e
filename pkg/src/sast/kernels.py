"""Hot inner loops, each with a Numba ``@njit`` implementation and a pure NumPy
fallback. The active path is picked per call from :func:`sast._backend.kernel_backend`.

Both paths must agree to floating point round-off; ``tests/test_kernels.py``
checks this and ``benchmarks/bench_kernels.py`` times them against each other.
"""
from __future__ import annotations

import math

import numpy as np

from ._backend import HAS_NUMBA, kernel_backend

if HAS_NUMBA:
    from numba import njit
else:  # pragma: no cover
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# event accumulation
# ---------------------------------------------------------------------------

def _accumulate_events_numpy(t, x, y, p, out, n_time_bins, duration_us, t_start):
    if t.size == 0:
        return out
    tb = ((t - t_start) * n_time_bins) // duration_us
    tb = np.clip(tb, 0, n_time_bins - 1)
    b = p.astype(np.int64) * n_time_bins + tb
    np.add.at(out, (b, y.astype(np.int64), x.astype(np.int64)), 1.0)
    return out


@njit(cache=True)
def _accumulate_events_numba(t, x, y, p, out, n_time_bins, duration_us, t_start):
    for i in range(t.shape[0]):
        tb = ((t[i] - t_start) * n_time_bins) // duration_us
        if tb < 0:
            tb = 0
        elif tb > n_time_bins - 1:
            tb = n_time_bins - 1
        b = np.int64(p[i]) * n_time_bins + tb
        out[b, y[i], x[i]] += 1.0
    return out


def accumulate_events(t, x, y, p, out, n_time_bins, duration_us, t_start=0):
    """Add one count per event into ``out[B, H, W]`` (in place, also returned)."""
    t = np.ascontiguousarray(t, dtype=np.int64)
    x = np.ascontiguousarray(x, dtype=np.int64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    p = np.ascontiguousarray(p, dtype=np.int64)
    if kernel_backend() == "numba":
        return _accumulate_events_numba(t, x, y, p, out, np.int64(n_time_bins),
                                        np.int64(duration_us), np.int64(t_start))
    return _accumulate_events_numpy(t, x, y, p, out, n_time_bins, duration_us, t_start)


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def _max_pool_numpy(v, f):
    B, H, W = v.shape
    return v.reshape(B, H // f, f, W // f, f).max(axis=(2, 4))


@njit(cache=True)
def _max_pool_numba(v, f):
    B, H, W = v.shape
    Ho, Wo = H // f, W // f
    out = np.empty((B, Ho, Wo), dtype=v.dtype)
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                m = v[b, i * f, j * f]
                for di in range(f):
                    for dj in range(f):
                        val = v[b, i * f + di, j * f + dj]
                        if val > m:
                            m = val
                out[b, i, j] = m
    return out


def max_pool(v: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping ``factor x factor`` max pooling over the last two axes of [B, H, W]."""
    if kernel_backend() == "numba":
        return _max_pool_numba(np.ascontiguousarray(v), np.int64(factor))
    return _max_pool_numpy(v, factor)


# ---------------------------------------------------------------------------
# masked multi-head attention over packed windows
# ---------------------------------------------------------------------------

def _masked_attention_numpy(tp, pad, wq, wk, wv, wo, n_heads, mask_value):
    N, K, C = tp.shape
    d = C // n_heads
    macs = 0

    def proj(x, w):
        nonlocal macs
        macs += x.shape[0] * x.shape[1] * w.shape[0] * w.shape[1]
        return x @ w.T

    q = proj(tp, wq).reshape(N, K, n_heads, d).transpose(0, 2, 1, 3)
    k = proj(tp, wk).reshape(N, K, n_heads, d).transpose(0, 2, 1, 3)
    v = proj(tp, wv).reshape(N, K, n_heads, d).transpose(0, 2, 1, 3)

    logits = q @ k.transpose(0, 1, 3, 2)
    macs += N * n_heads * K * K * d
    logits = logits * (1.0 / math.sqrt(d))
    logits = logits + np.where(pad, mask_value, 0.0)[:, None, None, :]
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    attn = e / e.sum(axis=-1, keepdims=True)

    o = attn @ v
    macs += N * n_heads * K * K * d
    o = o.transpose(0, 2, 1, 3).reshape(N, K, C)
    out = proj(o, wo)
    return out.astype(tp.dtype, copy=False), macs


@njit(cache=True)
def _project_numba(x, w, out):
    # out[k, c] = sum_j x[k, j] * w[c, j]; returns MAC count
    K, Cin = x.shape
    Cout = w.shape[0]
    for k in range(K):
        for c in range(Cout):
            s = 0.0
            for j in range(Cin):
                s += x[k, j] * w[c, j]
            out[k, c] = s
    return K * Cout * Cin


@njit(cache=True)
def _masked_attention_numba(tp, pad, wq, wk, wv, wo, n_heads, mask_value):
    N, K, C = tp.shape
    d = C // n_heads
    scale = 1.0 / math.sqrt(d)
    out = np.empty((N, K, C), dtype=tp.dtype)
    q = np.empty((K, C), dtype=tp.dtype)
    k = np.empty((K, C), dtype=tp.dtype)
    v = np.empty((K, C), dtype=tp.dtype)
    o = np.empty((K, C), dtype=tp.dtype)
    logits = np.empty(K, dtype=np.float64)
    macs = 0
    for n in range(N):
        x = tp[n]
        macs += _project_numba(x, wq, q)
        macs += _project_numba(x, wk, k)
        macs += _project_numba(x, wv, v)
        for h in range(n_heads):
            lo = h * d
            for i in range(K):
                m = -np.inf
                for j in range(K):
                    s = 0.0
                    for c in range(lo, lo + d):
                        s += q[i, c] * k[j, c]
                    macs += d
                    s = s * scale
                    if pad[n, j]:
                        s += mask_value
                    logits[j] = s
                    if s > m:
                        m = s
                tot = 0.0
                for j in range(K):
                    logits[j] = math.exp(logits[j] - m)
                    tot += logits[j]
                for c in range(lo, lo + d):
                    o[i, c] = 0.0
                for j in range(K):
                    wgt = logits[j] / tot
                    for c in range(lo, lo + d):
                        o[i, c] += wgt * v[j, c]
                    macs += d
        macs += _project_numba(o, wo, out[n])
    return out, macs


def masked_attention(tp, pad, wq, wk, wv, wo, n_heads, mask_value):
    """Multi-head self-attention per packed window with additive key-column masking.

    ``tp`` is [N, K, C]; ``pad`` is a bool [N, K] marking padded key slots.
    Returns ``(out [N, K, C], macs)`` where ``macs`` counts every
    multiply-accumulate actually performed.
    """
    if kernel_backend() == "numba":
        dt = tp.dtype
        return _masked_attention_numba(
            np.ascontiguousarray(tp), np.ascontiguousarray(pad),
            np.ascontiguousarray(wq, dtype=dt), np.ascontiguousarray(wk, dtype=dt),
            np.ascontiguousarray(wv, dtype=dt), np.ascontiguousarray(wo, dtype=dt),
            np.int64(n_heads), float(mask_value))
    return _masked_attention_numpy(tp, pad, wq, wk, wv, wo, n_heads, mask_value)
