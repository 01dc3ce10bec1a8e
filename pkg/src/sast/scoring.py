"""Token scoring driven by token responses and event sparsity.

Initial scores are ``a * ReLU(W_R T + b_R) / F`` with control factor
``F = exp(W_F) r`` (floored at ``eps_F``). The same response and control factor
re-weight the tokens (STP weighting) so the scoring path receives gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorkit as tk

WEIGHT_FNS = ("sigmoid", "tanh", "softmax", "identity")


@dataclass
class ScoringParams:
    W_R: np.ndarray  # [C, C]
    b_R: np.ndarray  # [C]
    W_F: np.ndarray  # [C, B]
    a: float = 0.0002
    eps_F: float = 1e-8
    weight_fn: str = "sigmoid"

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError(f"a must be positive, got {self.a}")
        if self.eps_F <= 0:
            raise ValueError(f"eps_F must be positive, got {self.eps_F}")
        if self.weight_fn not in WEIGHT_FNS:
            raise ValueError(f"weight_fn must be one of {WEIGHT_FNS}, got {self.weight_fn!r}")
        C = self.W_R.shape[0]
        if self.W_R.shape != (C, C) or self.b_R.shape != (C,) or self.W_F.shape[0] != C:
            raise tk.ShapeError("scoring parameter shapes disagree")

    @classmethod
    def reference(cls, C: int, B: int, **kw) -> "ScoringParams":
        """Untrained reference configuration: identity response, zero bias, zero ExpL weights."""
        return cls(W_R=np.eye(C), b_R=np.zeros(C), W_F=np.zeros((C, B)), **kw)

    def to_flat(self) -> dict:
        return {
            "W_R": self.W_R.ravel().tolist(), "W_R_shape": list(self.W_R.shape),
            "b_R": self.b_R.ravel().tolist(), "b_R_shape": list(self.b_R.shape),
            "W_F": self.W_F.ravel().tolist(), "W_F_shape": list(self.W_F.shape),
            "a": self.a, "eps_F": self.eps_F, "weight_fn": self.weight_fn,
        }

    @classmethod
    def from_flat(cls, d: dict) -> "ScoringParams":
        arr = {k: np.asarray(d[k], dtype=np.float64).reshape(d[k + "_shape"]) for k in ("W_R", "b_R", "W_F")}
        return cls(**arr, a=float(d.get("a", 0.0002)), eps_F=float(d.get("eps_F", 1e-8)),
                   weight_fn=str(d.get("weight_fn", "sigmoid")))


@dataclass
class ScoreTensors:
    R: np.ndarray  # [N_w, N_t, C]
    F: np.ndarray  # [C]
    S_i: np.ndarray  # [N_w, N_t, C]
    pre_activation: np.ndarray = field(repr=False, default=None)
    F_raw: np.ndarray = field(repr=False, default=None)


def response(T: np.ndarray, W_R: np.ndarray, b_R: np.ndarray) -> np.ndarray:
    return np.maximum(tk.linear(T, W_R, b_R), 0.0)


def control_factor(r: np.ndarray, W_F: np.ndarray, eps_F: float) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if W_F.shape[1] != r.shape[0]:
        raise tk.ShapeError(f"W_F expects {W_F.shape[1]} bins, r has {r.shape[0]}")
    return np.maximum(np.exp(W_F) @ r, eps_F)


def initial_scores(R: np.ndarray, F: np.ndarray, a: float) -> np.ndarray:
    return a * R / F


def score(T: np.ndarray, r: np.ndarray, params: ScoringParams) -> ScoreTensors:
    z = tk.linear(T, params.W_R, params.b_R)
    R = np.maximum(z, 0.0)
    F_raw = np.exp(params.W_F) @ np.asarray(r, dtype=np.float64)
    F = np.maximum(F_raw, params.eps_F)
    return ScoreTensors(R=R, F=F, S_i=initial_scores(R, F, params.a), pre_activation=z, F_raw=F_raw)


def _apply_fn(x: np.ndarray, fn: str) -> np.ndarray:
    if fn == "sigmoid":
        return tk.sigmoid(x)
    if fn == "tanh":
        return np.tanh(x)
    if fn == "softmax":
        return tk.softmax_lastdim(x)
    if fn == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown weight function {fn!r}")


def stp_weight(T: np.ndarray, R: np.ndarray, F: np.ndarray, weight_fn: str = "sigmoid") -> np.ndarray:
    """``fn(R) * fn(F) * T``; the identity setting returns ``T`` unchanged."""
    if weight_fn == "identity":
        return T.copy()
    W_s = _apply_fn(R, weight_fn)
    W_tp = _apply_fn(F, weight_fn)
    return (W_s * W_tp * T).astype(T.dtype, copy=False)


@dataclass
class ScoringGrads:
    W_R: np.ndarray
    b_R: np.ndarray
    W_F: np.ndarray


def scoring_grad(T: np.ndarray, r: np.ndarray, params: ScoringParams, upstream: np.ndarray) -> ScoringGrads:
    """Gradients of ``sum(upstream * T*)`` with respect to ``W_R``, ``b_R`` and ``W_F``.

    The ReLU subgradient at 0 is taken as 0, and so is the gradient through the
    ``eps_F`` floor when it is active.
    """
    fn = params.weight_fn
    st = score(T, r, params)
    if fn == "identity":
        return ScoringGrads(np.zeros_like(params.W_R), np.zeros_like(params.b_R), np.zeros_like(params.W_F))
    if fn == "sigmoid":
        gR, gF = tk.sigmoid(st.R), tk.sigmoid(st.F)
        dgR, dgF = gR * (1 - gR), gF * (1 - gF)
    elif fn == "tanh":
        gR, gF = np.tanh(st.R), np.tanh(st.F)
        dgR, dgF = 1 - gR ** 2, 1 - gF ** 2
    else:
        raise ValueError(f"analytic gradient not available for weight_fn={fn!r}")

    G = upstream
    dR = G * dgR * gF * T
    dz = dR * (st.pre_activation > 0)
    C = T.shape[-1]
    dz2 = dz.reshape(-1, C)
    dW_R = dz2.T @ T.reshape(-1, C)
    db_R = dz2.sum(axis=0)

    dF = (G * gR * T).reshape(-1, C).sum(axis=0) * dgF
    du = dF * (st.F_raw > params.eps_F)
    dW_F = du[:, None] * np.exp(params.W_F) * np.asarray(r, dtype=np.float64)[None, :]
    return ScoringGrads(dW_R, db_R, dW_F)
