"""Analytic FLOPs accounting (1 multiply-accumulate = 2 FLOPs).

A-FLOPs cover the attention-related matmuls: QKV/output projections, logits,
the attention-weighted sum and the MLP. Softmax, masking, norms and pointwise
activations are not counted. Padded slots count because they are computed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .selection import SelectionResult


def attention_flops(n_windows: int, K: int, C: int, n_heads: int = 1) -> int:
    # per head the logits and the weighted sum each cost K*K*(C/n_heads); summed over heads: K*K*C
    if min(n_windows, K, C, n_heads) < 0 or (C and C % n_heads):
        raise ValueError("invalid attention dimensions")
    per_window = 3 * K * C * C + K * K * C + K * K * C + K * C * C
    return 2 * n_windows * per_window


def mlp_flops(n_tokens: int, C: int, h: int = 4) -> int:
    return 2 * 2 * n_tokens * C * (h * C)


def scoring_flops(n_tokens: int, C: int, B: int) -> int:
    # response linear on every token + ExpL projection of the sparsity vector
    return 2 * n_tokens * C * C + 2 * C * B


def selection_flops(n_tokens: int, C: int) -> int:
    # channel p-norm accumulation, one add per element
    return n_tokens * C


@dataclass(frozen=True)
class LayerFlops:
    attention: int
    mlp: int
    scoring: int
    selection: int
    dense_attention: int
    dense_mlp: int

    @property
    def a_flops(self) -> int:
        return self.attention + self.mlp

    @property
    def dense_a_flops(self) -> int:
        return self.dense_attention + self.dense_mlp


def layer_report(sel: SelectionResult, C: int, n_heads: int = 1, mlp_ratio: int = 4, B: int = 0,
                 scored: bool = True) -> LayerFlops:
    """FLOPs of one layer given its selection; dense figures assume every token kept."""
    N_w, N_t = sel.N_w, sel.N_t
    K = int(sel.kept_counts.max()) if sel.n_windows else 0
    return LayerFlops(
        attention=attention_flops(sel.n_windows, K, C, n_heads),
        mlp=mlp_flops(sel.n_tokens, C, mlp_ratio),
        scoring=scoring_flops(N_w * N_t, C, B) if scored else 0,
        selection=selection_flops(N_w * N_t, C) if scored else 0,
        dense_attention=attention_flops(N_w, N_t, C, n_heads),
        dense_mlp=mlp_flops(N_w * N_t, C, mlp_ratio),
    )


@dataclass
class FlopsReport:
    per_layer: list = field(default_factory=list)  # LayerFlops
    other: int = 0  # patch embed/merge and LSTM

    @property
    def a_flops(self) -> int:
        return sum(l.a_flops for l in self.per_layer)

    @property
    def dense_a_flops(self) -> int:
        return sum(l.dense_a_flops for l in self.per_layer)

    @property
    def total_flops(self) -> int:
        return self.a_flops + sum(l.scoring + l.selection for l in self.per_layer) + self.other

    @property
    def reduction_pct(self) -> float:
        d = self.dense_a_flops
        return 100.0 * (1.0 - self.a_flops / d) if d else 0.0


def aggregate_report(entries, other: int = 0) -> FlopsReport:
    return FlopsReport(per_layer=list(entries), other=int(other))


def patch_embed_flops(H_t: int, W_t: int, C: int, fan_in: int) -> int:
    return 2 * H_t * W_t * C * fan_in


def lstm_flops(H_t: int, W_t: int, C: int) -> int:
    return 2 * H_t * W_t * 4 * C * 2 * C
