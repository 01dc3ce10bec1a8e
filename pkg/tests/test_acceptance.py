"""Acceptance criteria A1-A10, each at its stated tolerance.

Every test records a single PASS/FAIL line (shown in the pytest terminal
summary, or on stdout when this file is run as a script).
"""
import time

import numpy as np
import pytest

import gradcheck
import oracles as orc
import test_selection
import test_sparse_attention
import test_tensorkit
from acceptance_report import record
from sast import backbone as bb
from sast import cli
from sast import events as ev
from sast import flopsmeter as fm
from sast import sparse_attention as sa
from sast import tensorkit as tk
from sast._backend import HAS_NUMBA, use_kernels
from sast.scoring import ScoringParams
from sast.selection import CompetitionParams, IntensifiedScores, SelectionResult, Thresholds, select_mask

LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)
SEEDS = 20
KERNELS = ["numpy"] + (["numba"] if HAS_NUMBA else [])


def random_selection(r, N_w, N_t):
    mask = r.random((N_w, N_t)) < r.uniform(0.2, 0.9)
    for w in range(N_w):
        if not mask[w].any():
            mask[w, r.integers(N_t)] = True
    return SelectionResult.from_mask(mask)


def random_attention(r, C, n_heads):
    return sa.AttentionParams(*(r.standard_normal((C, C)) / np.sqrt(C) for _ in range(4)), n_heads=n_heads)


# ---------------------------------------------------------------------------

def test_a1_filler_perturbation_isolated():
    t0 = time.perf_counter()
    worst, trials = 0.0, 0
    r = np.random.default_rng(101)
    for name in KERNELS:
        with use_kernels(name):
            for _ in range(1000):
                N_w, N_t = r.integers(1, 6), int(r.choice([4, 9, 16]))
                n_heads = int(r.choice([1, 2, 4]))
                C = n_heads * int(r.integers(1, 4))
                T = r.standard_normal((N_w, N_t, C))
                sel = random_selection(r, N_w, N_t)
                params = random_attention(r, C, n_heads)
                base = sa.mswsa(sa.pad_pack(sa.gather(T, sel), T, sel), params).values
                T2 = T.copy()
                dropped = ~sel.token_mask
                T2[dropped] += r.standard_normal((int(dropped.sum()), C)) * 10 ** r.uniform(0, 4)
                out = sa.mswsa(sa.pad_pack(sa.gather(T2, sel), T2, sel), params).values
                worst = max(worst, float(np.max(np.abs(out - base))))
                trials += 1
    ok = worst <= 1e-9
    record("A1", ok, f"leakage isolation: {trials} trials, max real-token change {worst:.2e} (tol 1e-9), "
                     f"{time.perf_counter() - t0:.2f}s")
    assert ok


def test_a2_keep_all_equals_dense():
    r = np.random.default_rng(202)
    worst, n = 0.0, 0
    for i in range(120):
        n_heads = int(r.choice([1, 2]))
        C = 4 * n_heads
        side = int(r.choice([2, 3]))
        H, W = side * int(r.integers(1, 4)), side * int(r.integers(1, 4))
        B = 4
        kind = "window" if i % 2 == 0 else "grid"

        def m(*shape):
            return r.standard_normal(shape) / np.sqrt(shape[-1])

        cfg = bb.LayerConfig(
            partition_kind=kind, window_side=side,
            scoring=ScoringParams(m(C, C), r.standard_normal(C) * 0.1, m(C, B), a=float(r.uniform(1e-4, 1)),
                                  weight_fn=str(r.choice(["sigmoid", "tanh", "identity"]))),
            competition=CompetitionParams(), attention=random_attention(r, C, n_heads),
            mlp=sa.MlpParams(m(4 * C, C), r.standard_normal(4 * C) * 0.1, m(C, 4 * C), r.standard_normal(C) * 0.1),
            cb_enabled=bool(i % 3 == 0), keep_all=True,
            norm1=(1 + 0.1 * r.standard_normal(C), 0.1 * r.standard_normal(C)),
            norm2=(1 + 0.1 * r.standard_normal(C), 0.1 * r.standard_normal(C)))
        x = r.standard_normal((H, W, C)) * 3
        v = (r.random((B, H, W)) < 0.3).astype(float)
        a, sel, _ = bb.sast_layer(x, v, cfg)
        d, _, _ = bb.dense_layer(x, v, cfg)
        worst = max(worst, float(np.max(np.abs(a - d))))
        n += 1
    ok = worst <= 1e-9
    record("A2", ok, f"keep-all layer vs dense window attention: {n} instances, max |diff| {worst:.2e} (tol 1e-9)")
    assert ok


def test_a3_small_window_oracle():
    r = np.random.default_rng(303)
    worst = {"d1": 0.0, "multi": 0.0}
    counts = {"d1": 0, "multi": 0}
    for name in KERNELS:
        with use_kernels(name):
            for i in range(300):
                kind = "d1" if i % 2 == 0 else "multi"
                if kind == "d1":
                    n_heads = int(r.choice([1, 2, 3]))
                    C = n_heads
                else:
                    n_heads = int(r.choice([1, 2]))
                    C = n_heads * int(r.integers(2, 4))
                N_w = int(r.integers(1, 4))
                K = int(r.integers(1, 4))
                tp = r.standard_normal((N_w, K, C)) * 2
                pad = np.zeros((N_w, K), bool)
                for w in range(N_w):
                    n_real = int(r.integers(1, K + 1))
                    pad[w, n_real:] = True
                params = random_attention(r, C, n_heads)
                pk = sa.PackedWindows(tp, pad, np.arange(N_w), np.tile(np.arange(K), (N_w, 1)), (~pad).sum(1))
                got = sa.mswsa(pk, params)
                ref = []
                for w in range(N_w):
                    rows = orc.attention_window(tp[w].tolist(), pad[w].tolist(), params.W_Q.tolist(),
                                                params.W_K.tolist(), params.W_V.tolist(), params.W_O.tolist(), n_heads)
                    ref += [rows[k] for k in range(K) if not pad[w, k]]
                worst[kind] = max(worst[kind], float(np.max(np.abs(got.values - np.array(ref)))))
                counts[kind] += 1
    ok = worst["d1"] <= 1e-12 and worst["multi"] <= 1e-9
    record("A3", ok, f"mswsa vs brute-force oracle on <=3-token windows: d_head=1 {counts['d1']} cases "
                     f"max {worst['d1']:.2e} (tol 1e-12); multi-dim heads {counts['multi']} cases "
                     f"max {worst['multi']:.2e} (tol 1e-9)")
    assert ok


_ladder_cache = {}


def ladder():
    """Reference configuration over the density ladder: step outputs of the sparse and fixed-ratio variants per level."""
    if _ladder_cache:
        return _ladder_cache
    t0 = time.perf_counter()
    net = bb.SastBackbone(bb.BackboneConfig())
    variants = {"sast": net, "fixed": net.with_overrides(mode="fixed")}
    out = {k: [] for k in variants}
    for d in LEVELS:
        for k in variants:
            out[k].append([])
        for seed in range(SEEDS):
            e = ev.synth_scene(ev.SceneSpec(density_level=d, seed=seed))
            v = ev.voxelize(e, 64, 64, 2, 50_000)
            for k, m in variants.items():
                m.reset()
                out[k][-1].append(m.step(v))
    _ladder_cache.update(out)
    _ladder_cache["seconds"] = time.perf_counter() - t0
    return _ladder_cache


def test_a4_retention_grows_with_density():
    t0 = time.perf_counter()
    lad = ladder()
    means = [float(np.mean([s.retain_ratio for s in level])) for level in lad["sast"]]
    elapsed = time.perf_counter() - t0
    ok = all(b >= a for a, b in zip(means, means[1:])) and means[-1] > means[0] and elapsed < 60
    record("A4", ok, "mean retain ratio by density level " + ", ".join(f"{m:.4f}" for m in means)
           + f" ({SEEDS} seeds, 64x64, {elapsed:.1f}s; tol: non-decreasing, last > first, < 60s)")
    assert ok


def test_a5_dynamic_vs_constant_compute():
    lad = ladder()
    sast = np.array([s.flops.a_flops for level in lad["sast"] for s in level], float)
    fixed = np.array([s.flops.a_flops for level in lad["fixed"] for s in level], float)
    dense = np.array([s.flops.dense_a_flops for level in lad["sast"] for s in level], float)
    ok = fixed.var() == 0 and sast.var() > 0 and sast.mean() < dense.mean()
    record("A5", ok, f"A-FLOPs over {sast.size} samples: fixed-ratio var {fixed.var():.3g}, sast var {sast.var():.3g}, "
                     f"sast mean {sast.mean():.4g} < dense {dense.mean():.4g}")
    assert ok


def test_a6_flops_oracle():
    r = np.random.default_rng(606)
    T = r.standard_normal((1, 2, 4))
    sel = SelectionResult.keep_all(1, 2)
    with tk.mac_counter() as att:
        sa.mswsa(sa.pad_pack(sa.gather(T, sel), T, sel), random_attention(r, 4, 1))
    mlp_params = sa.MlpParams(r.standard_normal((16, 4)), np.zeros(16), r.standard_normal((4, 16)), np.zeros(4))
    with tk.mac_counter() as mlp:
        sa.sparse_mlp(sa.gather(T, sel), mlp_params)
    a, m = fm.attention_flops(1, 2, 4, 1), fm.mlp_flops(2, 4, 4)
    ok = a == 320 == att.flops and m == 512 == mlp.flops
    record("A6", ok, f"attention_flops(1,2,4,1)={a} counter={att.flops}; mlp_flops(2,4,4)={m} counter={mlp.flops}")
    assert ok


def test_a7_gradient_check():
    errs = [gradcheck.max_rel_error(seed, "sigmoid" if seed % 4 else "tanh") for seed in range(120)]
    worst = max(errs)
    ok = worst <= 1e-4
    record("A7", ok, f"scoring_grad vs central differences (h=1e-5): {len(errs)} instances, max rel err {worst:.2e} "
                     f"(tol 1e-4)")
    assert ok


def test_a8_structural_invariants():
    props = {
        "softmax normalization": test_tensorkit.test_softmax_normalized,
        "p-norm homogeneity": test_tensorkit.test_p_norm_homogeneous,
        "pad/unpad identity": test_sparse_attention.test_pad_unpad_identity,
        "scatter-back pass-through": test_sparse_attention.test_scatter_back_passes_unselected_bitwise,
        "selection monotone in b": test_selection.test_selection_monotone_in_b,
        "CB mean preservation": test_sparse_attention.test_context_broadcast_preserves_mean,
    }
    failed = []
    for name, prop in props.items():
        try:
            prop()
        except Exception:  # noqa: BLE001
            failed.append(name)
    ok = not failed
    record("A8", ok, f"{len(props)} property suites (hypothesis, 100 examples each)"
           + (f"; failed: {', '.join(failed)}" if failed else ": all hold"))
    assert ok


def test_a9_three_and_two_tokens():
    r = np.random.default_rng(909)
    C = 4
    sel = select_mask(IntensifiedScores(np.array([[0.5, 0.3, 0.19, 0.01], [0.6, 0.37, 0.02, 0.01]]),
                                        np.array([0.5, 0.5])), Thresholds(0.099 / 4, 0.099 / 2))
    grid = r.standard_normal((2, 4, C))  # two 2x2 windows
    pk = sa.pad_pack(sa.gather(grid, sel), grid, sel)
    params = random_attention(r, C, 2)
    att = sa.mswsa(pk, params)
    # the masked column carries no weight: window 1 equals attention over its two real tokens alone
    real = [orc.attention_window(grid[1, :2].tolist(), [False, False], params.W_Q.tolist(), params.W_K.tolist(),
                                 params.W_V.tolist(), params.W_O.tolist(), 2)]
    masked_ok = np.max(np.abs(att.values[3:] - np.array(real[0]))) <= 1e-12
    mlp = sa.MlpParams(r.standard_normal((8, C)), r.standard_normal(8), r.standard_normal((C, 8)), r.standard_normal(C))
    out = sa.scatter_back(sa.sparse_mlp(att.with_values(att.values + sa.gather(grid, sel).values), mlp), grid, sel)
    updated = int(np.any(out != grid, axis=-1).sum())
    ok = (sel.kept_counts.tolist() == [3, 2] and pk.K_max == 3 and int(pk.pad_mask.sum()) == 1
          and pk.pad_mask[1].tolist() == [False, False, True] and masked_ok and updated == 5)
    record("A9", ok, f"kept counts {sel.kept_counts.tolist()}, K_max {pk.K_max}, fillers {int(pk.pad_mask.sum())}, "
                     f"masked column isolated {bool(masked_ok)}, updated positions {updated}")
    assert ok


def test_a10_cli_determinism(tmp_path):
    args = ["--samples", "2", "--density", "0.2,0.6", "--seed", "17"]
    for d in ("a", "b"):
        assert cli.main(["run", "--out", str(tmp_path / d), *args]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    extra = {p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file()} - set(files)
    ok = same and not extra and len(files) > 0
    record("A10", ok, f"two seeded runs: {len(files)} artifacts, byte-identical {same and not extra}")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
