import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles as orc
from sast import tensorkit as tk

finite = st.floats(-50, 50, allow_nan=False)


def test_window_partition_single_window():
    x = np.arange(4.0).reshape(2, 2, 1)
    assert tk.window_partition(x, 2)[0, :, 0].tolist() == [0, 1, 2, 3]


def test_window_partition_index_of_2_3():
    x = np.zeros((4, 4, 1))
    x[2, 3, 0] = 1
    w, s = np.argwhere(tk.window_partition(x, 2)[..., 0])[0]
    assert (w, s) == orc.window_index(2, 3, 2, 4) == (3, 1)


def test_grid_partition_window_zero():
    pos = np.stack(np.meshgrid(np.arange(4), np.arange(4), indexing="ij"), -1).astype(float)
    members = {tuple(map(int, p)) for p in tk.grid_partition(pos, 2)[0]}
    assert members == {(0, 0), (0, 2), (2, 0), (2, 2)}


def test_grid_equals_window_when_degenerate(rng):
    x = rng.standard_normal((2, 2, 3))
    assert np.array_equal(tk.grid_partition(x, 2), tk.window_partition(x, 2))


@pytest.mark.parametrize("kind, index", [("window", orc.window_index), ("grid", None)])
def test_partition_matches_index_oracle(kind, index, rng):
    H, W, side = 8, 12, 4
    x = rng.standard_normal((H, W, 2))
    P = tk.partition(x, side, kind)
    for i in range(H):
        for j in range(W):
            w, s = orc.window_index(i, j, side, W) if kind == "window" else orc.grid_index(i, j, side, H, W)
            assert np.array_equal(P[w, s], x[i, j])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.sampled_from(["window", "grid"]))
def test_partition_roundtrip(side, mh, mw, C, kind):
    H, W = side * mh, side * mw
    x = np.random.default_rng(H * 31 + W).standard_normal((H, W, C))
    P = tk.partition(x, side, kind)
    assert P.shape == (mh * mw, side * side, C)
    assert np.array_equal(tk.reverse(P, side, H, W, kind), x)


def test_partition_non_divisible():
    with pytest.raises(tk.ShapeError):
        tk.window_partition(np.zeros((5, 4, 1)), 2)
    with pytest.raises(tk.ShapeError):
        tk.WindowGeometry(6, 4, 4)


def test_geometry_counts():
    g = tk.WindowGeometry(8, 12, 4)
    assert (g.N_w, g.N_t) == (6, 16)


def test_linear_cases(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(tk.linear(x, np.eye(4), np.zeros(4)), x)
    assert tk.linear(np.array([1.0, 2.0]), np.array([[1.0, 1.0]]), np.array([0.5])).tolist() == [3.5]
    W, b = rng.standard_normal((5, 4)), rng.standard_normal(5)
    assert np.max(np.abs(tk.linear(x, W, b) - orc.matmul_loop(x, W, b))) <= 1e-12


def test_linear_shape_error():
    with pytest.raises(tk.ShapeError):
        tk.linear(np.zeros((2, 3)), np.zeros((4, 2)))


def test_softmax_examples():
    assert np.allclose(tk.softmax_lastdim(np.array([0.0, 0.0])), 0.5)
    assert np.allclose(tk.softmax_lastdim(np.full(4, 7.3)), 0.25)
    out = tk.softmax_lastdim(np.array([1.0, 2.0, -1e9]))
    assert abs(out[0] - 0.26894) < 1e-5 and abs(out[1] - 0.73106) < 1e-5 and out[2] <= 1e-12
    ref = orc.softmax_list([1.0, 2.0])
    assert abs(out[0] - ref[0]) <= 1e-15


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_normalized(x):
    s = tk.softmax_lastdim(x)
    assert np.all(s >= 0)
    assert np.max(np.abs(s.sum(-1) - 1.0)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, 5, elements=finite), st.floats(-100, 100))
def test_softmax_shift_invariant(x, c):
    assert np.allclose(tk.softmax_lastdim(x), tk.softmax_lastdim(x + c), atol=1e-12)


def test_p_norm_examples(rng):
    assert tk.p_norm(np.array([1.0, -2.0, 3.0]), 1.0) == 6.0
    assert tk.p_norm(np.array([3.0, 4.0]), 2.0) == 5.0
    x = rng.standard_normal((2, 4, 3))
    ref = np.array([[orc.pnorm_list(x[i, j].tolist(), 1.0) for j in range(4)] for i in range(2)])
    assert np.max(np.abs(tk.p_norm(x, 1.0, axis=-1) - ref)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, 6, elements=finite), st.floats(1.0, 4.0), st.floats(-20, 20))
def test_p_norm_homogeneous(x, p, lam):
    lhs = tk.p_norm(lam * x, p)
    rhs = abs(lam) * tk.p_norm(x, p)
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(rhs))


def test_p_norm_rejects_small_p():
    with pytest.raises(ValueError):
        tk.p_norm(np.ones(2), 0.5)


def test_pe_properties():
    pe = tk.sinusoidal_pe(3, 5, 8)
    assert pe.shape == (3, 5, 8)
    sin_ch = [0, 1, 4, 5]
    assert np.all(pe[0, 0, sin_ch] == 0) and np.all(pe[0, 0, [2, 3, 6, 7]] == 1)
    assert np.all(np.abs(pe) <= 1)
    # the first half of the channels encodes the column
    assert np.allclose(pe[0, 1, :4], orc.sinusoid_1d(1, 4), atol=1e-15)
    assert np.allclose(pe[1, 0, 4:], orc.sinusoid_1d(1, 4), atol=1e-15)
    with pytest.raises(ValueError):
        tk.sinusoidal_pe(2, 2, 6)


def test_patch_embed_cases(rng):
    W_e, b_e = rng.standard_normal((3, 2 * 4)), np.zeros(3)
    assert not tk.patch_embed(np.zeros((2, 4, 4)), 2, W_e, b_e).any()
    v = rng.standard_normal((3, 4, 4))
    assert np.array_equal(tk.patch_embed(v, 1, np.eye(3), np.zeros(3)), v.transpose(1, 2, 0))
    v = rng.standard_normal((2, 6, 4))
    b = rng.standard_normal(3)
    assert np.max(np.abs(tk.patch_embed(v, 2, W_e, b) - orc.patch_embed_loop(v, 2, W_e, b))) <= 1e-12


def test_patch_merge_cases(rng):
    x = rng.standard_normal((4, 6, 2))
    W_m, b_m = rng.standard_normal((4, 8)), rng.standard_normal(4)
    assert not tk.patch_merge(np.zeros((4, 6, 2)), W_m, np.zeros(4)).any()
    sel = np.zeros((2, 8))
    sel[:, :2] = np.eye(2)  # keep the top-left neighbour
    assert np.array_equal(tk.patch_merge(x, sel, np.zeros(2)), x[::2, ::2])
    assert np.max(np.abs(tk.patch_merge(x, W_m, b_m) - orc.patch_merge_loop(x, W_m, b_m))) <= 1e-12


def test_layer_norm_cases(rng):
    g, b = rng.standard_normal(5), rng.standard_normal(5)
    assert np.array_equal(tk.layer_norm(np.full((2, 5), 3.0), g, b), np.broadcast_to(b, (2, 5)))
    x = rng.standard_normal((4, 5)) * 3 + 1
    y = tk.layer_norm(x, np.ones(5), np.zeros(5))
    assert np.max(np.abs(y.mean(-1))) < 1e-6 and np.max(np.abs(y.var(-1) - 1)) < 1e-5 * 10
    assert np.max(np.abs(tk.layer_norm(x, g, b) - orc.layer_norm_two_pass(x, g, b))) <= 1e-12


def test_gelu_reference_points():
    x = np.array([-1.0, 0.0, 1.0])
    ref = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
    assert np.allclose(tk.gelu(x), ref, atol=1e-15)


def test_lstm_zero_fixed_point():
    C = 3
    w = tk.LstmWeights(np.zeros((4 * C, C)), np.zeros((4 * C, C)), np.zeros(4 * C))
    z = np.zeros((2, 2, C))
    h, (h2, c2) = tk.lstm_step(np.ones((2, 2, C)), (z, z), w)
    assert not h.any() and not c2.any()


def test_lstm_forget_saturation(rng):
    C = 2
    b = np.zeros(4 * C)
    b[:C] = -50  # input gate shut
    b[C:2 * C] = 50  # forget gate open
    w = tk.LstmWeights(np.zeros((4 * C, C)), np.zeros((4 * C, C)), b)
    c = rng.standard_normal((1, 3, C))
    _, (_, c2) = tk.lstm_step(rng.standard_normal((1, 3, C)), (np.zeros_like(c), c), w)
    assert np.allclose(c2, c, atol=1e-12)


def test_lstm_against_loop(rng):
    C = 3
    w = tk.LstmWeights(rng.standard_normal((4 * C, C)), rng.standard_normal((4 * C, C)), rng.standard_normal(4 * C))
    x, h, c = (rng.standard_normal((2, 2, C)) for _ in range(3))
    y, (h2, c2) = tk.lstm_step(x, (h, c), w)
    rh, rc = orc.lstm_loop(x, h, c, w.W_x, w.W_h, w.b)
    assert np.max(np.abs(h2 - rh)) <= 1e-12 and np.max(np.abs(c2 - rc)) <= 1e-12 and np.array_equal(y, h2)


def test_mac_counter_nesting(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 4))
    with tk.mac_counter() as outer:
        tk.matmul(a, b)
        with tk.mac_counter() as inner:
            tk.matmul(a, b)
    assert inner.macs == 24 and outer.macs == 48 and outer.flops == 96
