"""Sparse transformer layers, blocks and the four-stage hierarchical backbone.

A layer partitions tokens into windows (or dilated grids), scores them against
the event sparsity of the matching voxel resolution, selects windows and
tokens, runs masked sparse attention and the sparse MLP on the selection, and
scatters the results back. Unselected positions pass through untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import events as ev
from . import flopsmeter as fm
from . import tensorkit as tk
from ._backend import float_dtype
from .scoring import ScoringParams, score, stp_weight
from .selection import CompetitionParams, SelectionResult, intensify, select_mask, thresholds
from .sparse_attention import (AttentionParams, MlpParams, context_broadcast, gather, mswsa,
                               pad_pack, scatter_back, sparse_mlp)

LAYER_MODES = ("sast", "dense", "fixed")


@dataclass
class LayerConfig:
    partition_kind: str
    window_side: int
    scoring: ScoringParams
    competition: CompetitionParams
    attention: AttentionParams
    mlp: MlpParams
    cb_enabled: bool = False
    share_token_selection: bool = False
    keep_all: bool = False
    norm1: tuple = None  # (gamma, beta) before attention
    norm2: tuple = None  # (gamma, beta) before the MLP

    def __post_init__(self):
        C = self.attention.W_Q.shape[0]
        if self.norm1 is None:
            self.norm1 = (np.ones(C), np.zeros(C))
        if self.norm2 is None:
            self.norm2 = (np.ones(C), np.zeros(C))

    @property
    def channels(self) -> int:
        return self.attention.W_Q.shape[0]


@dataclass
class LayerStats:
    retain_ratio_tokens: float
    retain_ratio_windows: float
    a_flops: int
    dense_a_flops: int
    score_heatmap: np.ndarray  # [H_t, W_t] token scores on the grid
    token_mask: np.ndarray  # bool [H_t, W_t]
    window_mask: np.ndarray  # bool [H_t, W_t], True where the window was kept
    n_tokens: int
    n_windows: int
    N_w: int
    N_t: int
    K_max: int
    flops: fm.LayerFlops
    r: np.ndarray


def _geometry(tokens: np.ndarray, cfg: LayerConfig) -> tk.WindowGeometry:
    H, W, _ = tokens.shape
    return tk.WindowGeometry(H, W, cfg.window_side)


def _to_grid(values: np.ndarray, cfg: LayerConfig, H: int, W: int) -> np.ndarray:
    return tk.reverse(values[..., None], cfg.window_side, H, W, cfg.partition_kind)[..., 0]


def _process_selected(T: np.ndarray, T_star: np.ndarray, sel: SelectionResult, cfg: LayerConfig) -> np.ndarray:
    """Attention + MLP (both pre-norm, residual) on the selected tokens; returns the partitioned grid."""
    A = tk.layer_norm(T_star, *cfg.norm1)
    T_s = gather(A, sel)
    attended = mswsa(pad_pack(T_s, A, sel), cfg.attention)
    y = gather(T, sel).values + attended.values
    m = sparse_mlp(attended.with_values(tk.layer_norm(y, *cfg.norm2)), cfg.mlp)
    z = context_broadcast(m.with_values(y + m.values), cfg.cb_enabled)
    return scatter_back(z, T, sel)


def _stats(sel: SelectionResult, S_t: np.ndarray, r: np.ndarray, cfg: LayerConfig, H: int, W: int, B: int):
    mask = sel.token_mask
    flops = fm.layer_report(sel, cfg.channels, cfg.attention.n_heads, cfg.mlp.expansion, B)
    return LayerStats(
        retain_ratio_tokens=sel.n_tokens / (sel.N_w * sel.N_t),
        retain_ratio_windows=sel.n_windows / sel.N_w,
        a_flops=flops.a_flops,
        dense_a_flops=flops.dense_a_flops,
        score_heatmap=_to_grid(S_t, cfg, H, W),
        token_mask=_to_grid(mask, cfg, H, W),
        window_mask=_to_grid(np.broadcast_to(sel.window_keep[:, None], mask.shape), cfg, H, W),
        n_tokens=sel.n_tokens,
        n_windows=sel.n_windows,
        N_w=sel.N_w,
        N_t=sel.N_t,
        K_max=int(sel.kept_counts.max()),
        flops=flops,
        r=np.asarray(r),
    )


def _score(tokens, voxel, cfg):
    H, W, _ = tokens.shape
    geom = _geometry(tokens, cfg)
    if voxel.shape[1:] != (H, W):
        raise tk.ShapeError(f"voxel {voxel.shape[1:]} not pooled to token grid {(H, W)}")
    r = ev.event_sparsity(voxel)
    T = tk.partition(tokens, cfg.window_side, cfg.partition_kind)
    st = score(T, r, cfg.scoring)
    T_star = stp_weight(T, st.R, st.F, cfg.scoring.weight_fn)
    return geom, r, T, st, T_star


def sast_layer(tokens: np.ndarray, voxel: np.ndarray, cfg: LayerConfig, shared: np.ndarray | None = None):
    """One sparse layer. ``voxel`` must already be pooled to the token grid.

    ``shared`` is a bool [H_t, W_t] token mask from the previous layer of the
    block; when given it replaces this layer's token filter.
    Returns ``(tokens, SelectionResult, LayerStats)``.
    """
    H, W, _ = tokens.shape
    geom, r, T, st, T_star = _score(tokens, voxel, cfg)
    scores = intensify(st.S_i, cfg.competition.p)
    if cfg.keep_all:
        sel = SelectionResult.keep_all(geom.N_w, geom.N_t)
    else:
        allow = None
        if shared is not None:
            allow = tk.partition(np.asarray(shared, bool)[..., None], cfg.window_side, cfg.partition_kind)[..., 0]
        sel = select_mask(scores, thresholds(cfg.competition.b, geom), allow)
    out = _process_selected(T, T_star, sel, cfg)
    out = tk.reverse(out, cfg.window_side, H, W, cfg.partition_kind)
    return out, sel, _stats(sel, scores.S_t, r, cfg, H, W, voxel.shape[0])


def dense_layer(tokens: np.ndarray, voxel: np.ndarray, cfg: LayerConfig, shared=None):
    """Baseline with no selection: plain batched window attention over every token.

    Written independently of the padding/masking path so it can serve as an
    oracle for the sparse layer under keep-all selection.
    """
    H, W, C = tokens.shape
    geom, r, T, st, T_star = _score(tokens, voxel, cfg)
    att = cfg.attention
    nh, d = att.n_heads, C // att.n_heads
    A = tk.layer_norm(T_star, *cfg.norm1)
    N_w, N_t = geom.N_w, geom.N_t

    def heads(x):
        return x.reshape(N_w, N_t, nh, d).transpose(0, 2, 1, 3)

    q, k, v = (heads(tk.linear(A, w)) for w in (att.W_Q, att.W_K, att.W_V))
    logits = tk.matmul(q, k.transpose(0, 1, 3, 2)) / math.sqrt(d)
    probs = tk.softmax_lastdim(logits)
    o = tk.matmul(probs, v).transpose(0, 2, 1, 3).reshape(N_w, N_t, C)
    y = T + tk.linear(o, att.W_O)
    h = tk.linear(tk.layer_norm(y, *cfg.norm2), cfg.mlp.W1, cfg.mlp.b1)
    if cfg.mlp.activation == "gelu":
        h = tk.gelu(h)
    z = y + tk.linear(h, cfg.mlp.W2, cfg.mlp.b2)
    if cfg.cb_enabled:
        flat = z.reshape(-1, C)
        z = (0.5 * flat + 0.5 * flat.mean(axis=0)).reshape(z.shape)
    sel = SelectionResult.keep_all(N_w, N_t)
    out = tk.reverse(z, cfg.window_side, H, W, cfg.partition_kind)
    return out, sel, _stats(sel, intensify(st.S_i, cfg.competition.p).S_t, r, cfg, H, W, voxel.shape[0])


def fixed_window_keep(T: np.ndarray, ratio: float) -> np.ndarray:
    """Keep the windows with the largest L2 activation, dropping ``floor(ratio * N_w)`` of them."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("fixed pruning ratio must lie in [0, 1)")
    N_w = T.shape[0]
    n_keep = max(1, N_w - int(math.floor(ratio * N_w)))
    l2 = np.sqrt((T.astype(np.float64) ** 2).sum(axis=(1, 2)))
    order = np.argsort(-l2, kind="stable")
    keep = np.zeros(N_w, dtype=bool)
    keep[order[:n_keep]] = True
    return keep


def fixed_ratio_layer(tokens: np.ndarray, voxel: np.ndarray, cfg: LayerConfig, ratio: float = 0.5, shared=None):
    """Baseline pruning a fixed fraction of windows by L2 activation; no token pruning."""
    H, W, _ = tokens.shape
    geom, r, T, st, T_star = _score(tokens, voxel, cfg)
    keep = fixed_window_keep(T, ratio)
    sel = SelectionResult.from_mask(np.broadcast_to(keep[:, None], (geom.N_w, geom.N_t)))
    out = _process_selected(T, T_star, sel, cfg)
    out = tk.reverse(out, cfg.window_side, H, W, cfg.partition_kind)
    return out, sel, _stats(sel, intensify(st.S_i, cfg.competition.p).S_t, r, cfg, H, W, voxel.shape[0])


def run_layer(tokens, voxel, cfg, mode="sast", shared=None, fixed_ratio=0.5):
    if mode == "sast":
        return sast_layer(tokens, voxel, cfg, shared)
    if mode == "dense":
        return dense_layer(tokens, voxel, cfg)
    if mode == "fixed":
        return fixed_ratio_layer(tokens, voxel, cfg, fixed_ratio)
    raise ValueError(f"unknown layer mode {mode!r}")


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

@dataclass
class BlockState:
    lstm_h: np.ndarray
    lstm_c: np.ndarray

    @classmethod
    def zeros(cls, H: int, W: int, C: int) -> "BlockState":
        return cls(np.zeros((H, W, C), dtype=float_dtype()), np.zeros((H, W, C), dtype=float_dtype()))


def sast_block(tokens, voxel, state: BlockState, cfgs, lstm: tk.LstmWeights, mode="sast", fixed_ratio=0.5):
    """Layer pairs (window then grid partition) followed by the per-token LSTM.

    Within each pair the second layer reuses the first layer's spatial token
    mask when its ``share_token_selection`` flag is set.
    Returns ``(h, new_state, [LayerStats, ...])``.
    """
    stats = []
    x = tokens
    shared = None
    for i, cfg in enumerate(cfgs):
        use = shared if (i % 2 == 1 and cfg.share_token_selection) else None
        x, _, st = run_layer(x, voxel, cfg, mode, use, fixed_ratio)
        shared = st.token_mask if i % 2 == 0 else None
        stats.append(st)
    h, (h_new, c_new) = tk.lstm_step(x, (state.lstm_h, state.lstm_c), lstm)
    return h, BlockState(h_new, c_new), stats


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

@dataclass
class BackboneConfig:
    height: int = 64
    width: int = 64
    n_time_bins: int = 2
    embed_dim: int = 16
    strides: tuple = (4, 2, 2, 2)
    window_side: int = 4
    depths: tuple = (1, 1, 1, 1)
    head_dim: int = 16
    mlp_ratio: int = 4
    a: float = 0.0002
    b: float = 0.099
    p: float = 1.0
    eps_F: float = 1e-8
    mask_value: float = -1e9
    weight_fn: str = "sigmoid"
    cb_enabled: bool = False
    share_token_selection: bool = True
    keep_all: bool = False
    mode: str = "sast"
    fixed_ratio: float = 0.5
    init: str = "reference"
    param_seed: int = 0
    # untrained stand-in for learned response scale: with a = 2e-4, a * R / F only
    # reaches the competitive range when raw-count tokens are scaled up this far
    embed_gain: float = 1e4
    merge_gain: float = 1.0

    @property
    def n_bins(self) -> int:
        return 2 * self.n_time_bins

    def stage_dims(self):
        """[(H_t, W_t, C, window_side, cumulative_stride), ...] per stage."""
        if len(self.strides) != 4 or any(s != 2 for s in self.strides[1:]):
            raise ValueError("strides must be (s0, 2, 2, 2): later stages merge 2x2 neighborhoods")
        if self.mode not in LAYER_MODES:
            raise ValueError(f"mode must be one of {LAYER_MODES}")
        out = []
        cum = 1
        for i, s in enumerate(self.strides):
            cum *= s
            if self.height % cum or self.width % cum:
                raise tk.ShapeError(f"cumulative stride {cum} must divide input {self.height}x{self.width}")
            H, W = self.height // cum, self.width // cum
            side = min(self.window_side, H, W)
            if H % side or W % side:
                raise tk.ShapeError(f"window side {side} must divide stage {i + 1} grid {H}x{W}")
            out.append((H, W, self.embed_dim * 2 ** i, side, cum))
        return out


@dataclass
class StageParams:
    W_in: np.ndarray
    b_in: np.ndarray
    layers: list
    lstm: tk.LstmWeights


def init_params(cfg: BackboneConfig) -> list:
    """Seeded untrained parameters for every stage."""
    rng = np.random.default_rng(cfg.param_seed)
    dt = float_dtype()

    def normal(shape, scale):
        return (rng.standard_normal(shape) * scale).astype(dt)

    stages = []
    B = cfg.n_bins
    prev_C = None
    for i, (H, W, C, side, _) in enumerate(cfg.stage_dims()):
        fan_in = B * cfg.strides[0] ** 2 if i == 0 else 4 * prev_C
        gain = cfg.embed_gain if i == 0 else cfg.merge_gain
        W_in, b_in = normal((C, fan_in), gain / math.sqrt(fan_in)), np.zeros(C, dtype=dt)
        n_heads = max(1, C // cfg.head_dim)
        layers = []
        for j in range(2 * cfg.depths[i]):
            if cfg.init == "reference":
                sp = ScoringParams.reference(C, B, a=cfg.a, eps_F=cfg.eps_F, weight_fn=cfg.weight_fn)
            elif cfg.init == "random":
                sp = ScoringParams(W_R=normal((C, C), 1 / math.sqrt(C)), b_R=normal(C, 0.1),
                                   W_F=normal((C, B), 0.5), a=cfg.a, eps_F=cfg.eps_F, weight_fn=cfg.weight_fn)
            else:
                raise ValueError(f"unknown init {cfg.init!r}")
            h = cfg.mlp_ratio
            layers.append(LayerConfig(
                partition_kind="window" if j % 2 == 0 else "grid",
                window_side=side,
                scoring=sp,
                competition=CompetitionParams(p=cfg.p, b=cfg.b),
                attention=AttentionParams(*(normal((C, C), 1 / math.sqrt(C)) for _ in range(4)),
                                          n_heads=n_heads, mask_value=cfg.mask_value),
                mlp=MlpParams(normal((h * C, C), 1 / math.sqrt(C)), np.zeros(h * C, dtype=dt),
                              normal((C, h * C), 1 / math.sqrt(h * C)), np.zeros(C, dtype=dt)),
                cb_enabled=cfg.cb_enabled,
                share_token_selection=cfg.share_token_selection and j % 2 == 1,
                keep_all=cfg.keep_all,
            ))
        lstm = tk.LstmWeights(normal((4 * C, C), 0.5 / math.sqrt(C)), normal((4 * C, C), 0.5 / math.sqrt(C)),
                              np.zeros(4 * C, dtype=dt))
        stages.append(StageParams(W_in, b_in, layers, lstm))
        prev_C = C
    return stages


@dataclass
class StepOutput:
    features: list  # outputs of every stage; stages 2-4 feed a detection neck
    stats: list  # per stage: list of LayerStats
    flops: fm.FlopsReport

    @property
    def layer_stats(self) -> list:
        return [s for stage in self.stats for s in stage]

    @property
    def tokens_total(self) -> int:
        return sum(s.N_w * s.N_t for s in self.layer_stats)

    @property
    def tokens_retained(self) -> int:
        return sum(s.n_tokens for s in self.layer_stats)

    @property
    def windows_retained(self) -> int:
        return sum(s.n_windows for s in self.layer_stats)

    @property
    def retain_ratio(self) -> float:
        return self.tokens_retained / self.tokens_total


class SastBackbone:
    """Stateful four-stage backbone; LSTM state carries across :meth:`step` calls.

    Not safe to share between threads; use one instance per worker.
    """

    def __init__(self, cfg: BackboneConfig, params: list | None = None):
        self.cfg = cfg
        self.dims = cfg.stage_dims()
        self.params = params if params is not None else init_params(cfg)
        self.reset()

    def reset(self):
        self.states = [BlockState.zeros(H, W, C) for H, W, C, _, _ in self.dims]

    def with_overrides(self, **kw) -> "SastBackbone":
        """A fresh backbone sharing weights but with layer flags/hyper-parameters replaced."""
        cfg = replace(self.cfg, **kw)
        params = []
        for sp in self.params:
            layers = []
            for lc in sp.layers:
                scoring = replace(lc.scoring, a=cfg.a, eps_F=cfg.eps_F, weight_fn=cfg.weight_fn)
                attention = replace(lc.attention, mask_value=cfg.mask_value)
                layers.append(replace(lc, scoring=scoring, competition=CompetitionParams(cfg.p, cfg.b),
                                      attention=attention, cb_enabled=cfg.cb_enabled, keep_all=cfg.keep_all,
                                      share_token_selection=cfg.share_token_selection and lc.partition_kind == "grid"))
            params.append(replace(sp, layers=layers))
        return SastBackbone(cfg, params)

    def step(self, voxel: np.ndarray) -> StepOutput:
        cfg = self.cfg
        if voxel.shape != (cfg.n_bins, cfg.height, cfg.width):
            raise tk.ShapeError(f"voxel shape {voxel.shape} != {(cfg.n_bins, cfg.height, cfg.width)}")
        x = None
        features, stats, per_layer = [], [], []
        other = 0
        for i, ((H, W, C, _, cum), sp) in enumerate(zip(self.dims, self.params)):
            if i == 0:
                x = tk.patch_embed(voxel, cfg.strides[0], sp.W_in, sp.b_in)
                x = x + tk.sinusoidal_pe(H, W, C)
                other += fm.patch_embed_flops(H, W, C, sp.W_in.shape[1])
            else:
                x = tk.patch_merge(x, sp.W_in, sp.b_in)
                other += fm.patch_embed_flops(H, W, C, sp.W_in.shape[1])
            pooled = ev.downsample_voxel(voxel, cum)
            x, self.states[i], st = sast_block(x, pooled, self.states[i], sp.layers, sp.lstm,
                                               cfg.mode, cfg.fixed_ratio)
            other += fm.lstm_flops(H, W, C)
            features.append(x)
            stats.append(st)
            per_layer += [s.flops for s in st]
        return StepOutput(features, stats, fm.aggregate_report(per_layer, other))


def sast_backbone(voxel_sequence, cfg: BackboneConfig, params: list | None = None):
    """Run a fresh backbone over a voxel sequence; returns the list of :class:`StepOutput`."""
    net = SastBackbone(cfg, params)
    return [net.step(v) for v in voxel_sequence]
