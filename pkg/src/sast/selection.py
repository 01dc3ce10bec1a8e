"""Window/token co-selection from initial scores.

Scores are intensified with a channel p-norm followed by a softmax (over the
tokens of each window for token scores, over windows for window scores) and
compared against ``b / N_t`` and ``b / N_w``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorkit as tk


@dataclass(frozen=True)
class CompetitionParams:
    p: float = 1.0
    b: float = 0.099

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.b <= 0:
            raise ValueError(f"b must be positive, got {self.b}")


@dataclass
class IntensifiedScores:
    S_t: np.ndarray  # [N_w, N_t]
    S_w: np.ndarray  # [N_w]


@dataclass(frozen=True)
class Thresholds:
    mu_t: float
    mu_w: float


@dataclass
class SelectionResult:
    window_keep: np.ndarray  # bool [N_w]
    token_keep: list  # one sorted int array per kept window, in window order
    N_t: int

    @property
    def N_w(self) -> int:
        return self.window_keep.shape[0]

    @property
    def kept_windows(self) -> np.ndarray:
        return np.flatnonzero(self.window_keep)

    @property
    def kept_counts(self) -> np.ndarray:
        return np.array([len(t) for t in self.token_keep], dtype=np.int64)

    @property
    def n_windows(self) -> int:
        return int(self.window_keep.sum())

    @property
    def n_tokens(self) -> int:
        return int(sum(len(t) for t in self.token_keep))

    @property
    def token_mask(self) -> np.ndarray:
        """Dense bool [N_w, N_t] view of the kept tokens."""
        m = np.zeros((self.N_w, self.N_t), dtype=bool)
        for w, idx in zip(self.kept_windows, self.token_keep):
            m[w, idx] = True
        return m

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "SelectionResult":
        mask = np.asarray(mask, dtype=bool)
        keep = mask.any(axis=1)
        return cls(window_keep=keep, token_keep=[np.flatnonzero(mask[w]) for w in np.flatnonzero(keep)],
                   N_t=mask.shape[1])

    @classmethod
    def keep_all(cls, N_w: int, N_t: int) -> "SelectionResult":
        return cls.from_mask(np.ones((N_w, N_t), dtype=bool))


def token_scores(S_i: np.ndarray, p: float) -> np.ndarray:
    return tk.softmax_lastdim(tk.p_norm(S_i, p, axis=-1))


def window_scores(S_i: np.ndarray, p: float, N_t: int | None = None) -> np.ndarray:
    N_t = S_i.shape[1] if N_t is None else N_t
    return tk.softmax_lastdim(tk.p_norm(S_i, p, axis=(1, 2)) / N_t)


def intensify(S_i: np.ndarray, p: float) -> IntensifiedScores:
    return IntensifiedScores(S_t=token_scores(S_i, p), S_w=window_scores(S_i, p))


def thresholds(b: float, geometry: tk.WindowGeometry) -> Thresholds:
    if b <= 0:
        raise ValueError(f"b must be positive, got {b}")
    return Thresholds(mu_t=b / geometry.N_t, mu_w=b / geometry.N_w)


def select_mask(scores: IntensifiedScores, th: Thresholds, token_allow: np.ndarray | None = None) -> SelectionResult:
    """Sequential window-then-token filter with strict ``>`` comparisons.

    ``token_allow`` (bool [N_w, N_t]) replaces the token filter with a given
    mask, as when a layer reuses the previous layer's token selection. Windows
    must then also contain at least one allowed token.

    Fallbacks: if no window passes, the best-scoring eligible window is kept;
    a kept window whose tokens all fail keeps its best-scoring token.
    """
    S_t, S_w = scores.S_t, scores.S_w
    N_w, N_t = S_t.shape
    if token_allow is None:
        eligible = np.ones(N_w, dtype=bool)
        tok = S_t > th.mu_t
    else:
        token_allow = np.asarray(token_allow, dtype=bool)
        eligible = token_allow.any(axis=1)
        if not eligible.any():
            raise ValueError("shared token mask selects nothing")
        tok = token_allow

    win = (S_w > th.mu_w) & eligible
    if not win.any():
        cand = np.where(eligible, S_w, -np.inf)
        win[int(np.argmax(cand))] = True

    token_keep = []
    for w in np.flatnonzero(win):
        idx = np.flatnonzero(tok[w])
        if idx.size == 0:
            idx = np.array([int(np.argmax(S_t[w]))])
        token_keep.append(idx)
    return SelectionResult(window_keep=win, token_keep=token_keep, N_t=N_t)


def select(T_star: np.ndarray, scores: IntensifiedScores, th: Thresholds,
           token_allow: np.ndarray | None = None):
    """Select windows then tokens; returns ``(SelectionResult, T_s)`` with ``T_s`` a
    :class:`sast.sparse_attention.Ragged` of the kept weighted tokens."""
    from .sparse_attention import gather

    sel = select_mask(scores, th, token_allow)
    return sel, gather(T_star, sel)
