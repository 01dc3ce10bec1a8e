"""Masked sparse window self-attention over ragged token selections.

Selected tokens of each kept window are padded to a common length with that
window's own filtered-out tokens, attended with the padded key columns masked
out, un-padded, passed through a sparse MLP and scattered back into the grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensorkit as tk
from .selection import SelectionResult


@dataclass
class Ragged:
    """Rows of a ragged per-window token set, ordered by window then token index."""
    values: np.ndarray  # [N, C]
    windows: np.ndarray  # [N] window index of each row
    tokens: np.ndarray  # [N] token slot of each row

    def __len__(self):
        return self.values.shape[0]

    def with_values(self, values: np.ndarray) -> "Ragged":
        return Ragged(values, self.windows, self.tokens)


def selection_index(sel: SelectionResult) -> tuple[np.ndarray, np.ndarray]:
    if not sel.token_keep:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    wins = np.concatenate([np.full(len(t), w, dtype=np.int64) for w, t in zip(sel.kept_windows, sel.token_keep)])
    toks = np.concatenate([np.asarray(t, dtype=np.int64) for t in sel.token_keep])
    return wins, toks


def gather(tokens: np.ndarray, sel: SelectionResult) -> Ragged:
    w, t = selection_index(sel)
    return Ragged(tokens[w, t], w, t)


@dataclass
class PackedWindows:
    T_p: np.ndarray  # [N_sel_w, K_max, C]
    pad_mask: np.ndarray  # bool [N_sel_w, K_max], True marks a filler slot
    windows: np.ndarray  # [N_sel_w] source window of each packed row
    slots: np.ndarray  # [N_sel_w, K_max] source token index of every slot (fillers included)
    counts: np.ndarray  # [N_sel_w] real tokens per packed row

    @property
    def K_max(self) -> int:
        return self.T_p.shape[1]


def pad_pack(T_s: Ragged, all_tokens: np.ndarray, sel: SelectionResult) -> PackedWindows:
    """Pad every kept window to ``K_max`` slots; fillers are the window's dropped tokens in ascending order."""
    counts = sel.kept_counts
    if counts.size == 0 or counts.min() < 1:
        raise ValueError("every kept window needs at least one token")
    N_t = sel.N_t
    K = int(counts.max())
    n = counts.size
    slots = np.empty((n, K), dtype=np.int64)
    pad = np.zeros((n, K), dtype=bool)
    for i, idx in enumerate(sel.token_keep):
        k = len(idx)
        fill = np.setdiff1d(np.arange(N_t), idx)[:K - k]
        assert fill.size == K - k, "not enough filtered-out tokens to pad"
        slots[i, :k] = idx
        slots[i, k:] = fill
        pad[i, k:] = True
    wins = sel.kept_windows
    T_p = all_tokens[wins[:, None], slots]
    # real slots carry T_s exactly (it may differ from all_tokens if processed upstream)
    T_p[~pad] = T_s.values
    return PackedWindows(T_p=T_p, pad_mask=pad, windows=wins, slots=slots, counts=counts)


def unpad(packed: PackedWindows, values: np.ndarray | None = None) -> Ragged:
    values = packed.T_p if values is None else values
    real = ~packed.pad_mask
    rows = np.broadcast_to(packed.windows[:, None], packed.slots.shape)
    return Ragged(values[real], rows[real], packed.slots[real])


@dataclass
class AttentionParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    n_heads: int = 1
    mask_value: float = -1e9

    def __post_init__(self):
        C = self.W_Q.shape[0]
        if C % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide C={C}")
        if self.mask_value > -1e9:
            raise ValueError("mask_value must be <= -1e9")

    @classmethod
    def identity(cls, C: int, n_heads: int = 1) -> "AttentionParams":
        I = np.eye(C)
        return cls(I, I.copy(), I.copy(), I.copy(), n_heads=n_heads)


def mswsa(packed: PackedWindows, params: AttentionParams) -> Ragged:
    """Attention inside each packed window; padded key columns get ``mask_value``.

    Outputs at padded rows are discarded by the un-pad step.
    """
    out, macs = kernels.masked_attention(packed.T_p, packed.pad_mask, params.W_Q, params.W_K,
                                         params.W_V, params.W_O, params.n_heads, params.mask_value)
    tk.log_macs(macs)
    return unpad(packed, out)


@dataclass
class MlpParams:
    W1: np.ndarray  # [hC, C]
    b1: np.ndarray
    W2: np.ndarray  # [C, hC]
    b2: np.ndarray
    activation: str = "gelu"

    @property
    def expansion(self) -> int:
        return self.W1.shape[0] // self.W1.shape[1]


def sparse_mlp(T: Ragged, params: MlpParams) -> Ragged:
    """Two-layer MLP on the selected rows only."""
    h = tk.linear(T.values, params.W1, params.b1)
    if params.activation == "gelu":
        h = tk.gelu(h)
    elif params.activation != "identity":
        raise ValueError(f"unknown activation {params.activation!r}")
    return T.with_values(tk.linear(h, params.W2, params.b2))


def context_broadcast(T: Ragged, enabled: bool = True) -> Ragged:
    """Blend every selected token halfway towards the mean of all selected tokens."""
    if not enabled or len(T) == 0:
        return T
    v = T.values
    return T.with_values(0.5 * v + 0.5 * v.mean(axis=0, keepdims=True))


def scatter_back(processed: Ragged, original: np.ndarray, sel: SelectionResult) -> np.ndarray:
    w, t = selection_index(sel)
    if len(processed) != w.size or not (np.array_equal(processed.windows, w) and np.array_equal(processed.tokens, t)):
        raise ValueError("processed tokens do not match the selection")
    out = original.copy()
    out[w, t] = processed.values
    return out
