"""Dense numeric primitives and window/grid partitioning.

Token grids are plain ``ndarray`` s: ``[H_t, W_t, C]`` when spatial and
``[N_w, N_t, C]`` when partitioned. Matrix products go through :func:`matmul`
so that an active :func:`mac_counter` sees every multiply-accumulate.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from ._backend import float_dtype


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


# ---------------------------------------------------------------------------
# MAC instrumentation
# ---------------------------------------------------------------------------

class MacCounter:
    def __init__(self):
        self.macs = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs


_active_counters: contextvars.ContextVar[tuple] = contextvars.ContextVar("sast_mac_counters", default=())


@contextlib.contextmanager
def mac_counter():
    """Count multiply-accumulates of every instrumented product inside the block."""
    counter = MacCounter()
    token = _active_counters.set(_active_counters.get() + (counter,))
    try:
        yield counter
    finally:
        _active_counters.reset(token)


def log_macs(n: int) -> None:
    for c in _active_counters.get():
        c.macs += int(n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for a [..., m, k] and b [k, n] (or batched), logging m*k*n MACs per batch."""
    out = a @ b
    k = a.shape[-1]
    log_macs(out.size * k)
    return out


# ---------------------------------------------------------------------------
# geometry and partitioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowGeometry:
    H_t: int
    W_t: int
    window_side: int

    def __post_init__(self):
        s = self.window_side
        if s < 1 or self.H_t % s or self.W_t % s:
            raise ShapeError(f"window side {s} must divide token grid {self.H_t}x{self.W_t}")

    @property
    def N_t(self) -> int:
        return self.window_side ** 2

    @property
    def N_w(self) -> int:
        return (self.H_t // self.window_side) * (self.W_t // self.window_side)


def _check_side(x: np.ndarray, side: int) -> tuple[int, int, int]:
    if x.ndim != 3:
        raise ShapeError(f"expected [H, W, C] tokens, got shape {x.shape}")
    H, W, C = x.shape
    if side < 1 or H % side or W % side:
        raise ShapeError(f"window side {side} must divide token grid {H}x{W}")
    return H, W, C


def window_partition(x: np.ndarray, side: int) -> np.ndarray:
    """[H, W, C] -> [N_w, side*side, C] with contiguous blocks, windows and slots row-major."""
    H, W, C = _check_side(x, side)
    x = x.reshape(H // side, side, W // side, side, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(-1, side * side, C)


def window_reverse(windows: np.ndarray, side: int, H: int, W: int) -> np.ndarray:
    C = windows.shape[-1]
    x = windows.reshape(H // side, W // side, side, side, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(H, W, C)


def grid_partition(x: np.ndarray, side: int) -> np.ndarray:
    """[H, W, C] -> [N_w, side*side, C] where each window is a dilated ``side x side`` grid.

    Window ``(gi, gj)`` gathers rows ``gi + k * H/side`` and columns ``gj + l * W/side``.
    """
    H, W, C = _check_side(x, side)
    x = x.reshape(side, H // side, side, W // side, C).transpose(1, 3, 0, 2, 4)
    return x.reshape(-1, side * side, C)


def grid_reverse(windows: np.ndarray, side: int, H: int, W: int) -> np.ndarray:
    C = windows.shape[-1]
    x = windows.reshape(H // side, W // side, side, side, C).transpose(2, 0, 3, 1, 4)
    return x.reshape(H, W, C)


def partition(x: np.ndarray, side: int, kind: str) -> np.ndarray:
    if kind == "window":
        return window_partition(x, side)
    if kind == "grid":
        return grid_partition(x, side)
    raise ValueError(f"unknown partition kind {kind!r}")


def reverse(windows: np.ndarray, side: int, H: int, W: int, kind: str) -> np.ndarray:
    if kind == "window":
        return window_reverse(windows, side, H, W)
    if kind == "grid":
        return grid_reverse(windows, side, H, W)
    raise ValueError(f"unknown partition kind {kind!r}")


# ---------------------------------------------------------------------------
# dense ops
# ---------------------------------------------------------------------------

def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Affine map along the last axis, ``W`` stored as [D_out, D_in]."""
    W = np.asarray(W)
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {W.shape[1]}")
    y = matmul(x, W.T)
    if b is not None:
        b = np.asarray(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({W.shape[0]},)")
        y = y + b
    return y


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def p_norm(x: np.ndarray, p: float, axis=-1) -> np.ndarray:
    if p < 1:
        raise ValueError(f"p-norm requires p >= 1, got {p}")
    a = np.abs(x)
    if p == 1:
        return a.sum(axis=axis)
    if p == 2:
        return np.sqrt((a * a).sum(axis=axis))
    return (a ** p).sum(axis=axis) ** (1.0 / p)


def sigmoid(x):
    # split by sign so large |x| never overflows exp
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def sinusoidal_1d(pos, dim: int) -> np.ndarray:
    """1D encoding of ``pos`` into ``dim`` channels: ``dim/2`` sines then ``dim/2`` cosines."""
    if dim % 2:
        raise ShapeError("1D positional encoding needs an even channel count")
    half = dim // 2
    freq = 1.0 / 10000.0 ** (np.arange(half) * 2.0 / dim)
    ang = np.multiply.outer(np.asarray(pos, dtype=np.float64), freq)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def sinusoidal_pe(H_t: int, W_t: int, C: int) -> np.ndarray:
    """2D factorized sin-cos encoding [H_t, W_t, C]; first half encodes column, second half row."""
    if C % 4:
        raise ShapeError(f"positional encoding needs C divisible by 4, got {C}")
    half = C // 2
    ex = sinusoidal_1d(np.arange(W_t), half)
    ey = sinusoidal_1d(np.arange(H_t), half)
    pe = np.empty((H_t, W_t, C))
    pe[:, :, :half] = ex[None, :, :]
    pe[:, :, half:] = ey[:, None, :]
    return pe.astype(float_dtype(), copy=False)


def patch_embed(voxel: np.ndarray, stride: int, W_e: np.ndarray, b_e: np.ndarray) -> np.ndarray:
    """Strided convolution with kernel == stride: [B, H, W] -> [H/s, W/s, C].

    Each patch is flattened in (bin, row, col) order before the linear map.
    """
    B, H, W = voxel.shape
    s = stride
    if H % s or W % s:
        raise ShapeError(f"stride {s} must divide voxel {H}x{W}")
    patches = voxel.reshape(B, H // s, s, W // s, s).transpose(1, 3, 0, 2, 4).reshape(H // s, W // s, B * s * s)
    return linear(patches.astype(float_dtype(), copy=False), W_e, b_e)


def patch_merge(x: np.ndarray, W_m: np.ndarray, b_m: np.ndarray) -> np.ndarray:
    """Concatenate each 2x2 neighborhood (row-major) and map 4C -> W_m.shape[0]."""
    H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"patch merge needs even token dims, got {H}x{W}")
    cat = x.reshape(H // 2, 2, W // 2, 2, C).transpose(0, 2, 1, 3, 4).reshape(H // 2, W // 2, 4 * C)
    return linear(cat, W_m, b_m)


@dataclass
class LstmWeights:
    W_x: np.ndarray  # [4C, C], gate order i, f, g, o
    W_h: np.ndarray  # [4C, C]
    b: np.ndarray  # [4C]


def lstm_step(x: np.ndarray, state: tuple[np.ndarray, np.ndarray], w: LstmWeights):
    """Per-token LSTM cell with spatially shared weights. Returns ``(h', (h', c'))``."""
    h, c = state
    C = x.shape[-1]
    z = linear(x, w.W_x, w.b) + linear(h, w.W_h)
    i = sigmoid(z[..., :C])
    f = sigmoid(z[..., C:2 * C])
    g = np.tanh(z[..., 2 * C:3 * C])
    o = sigmoid(z[..., 3 * C:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, (h_new, c_new)
