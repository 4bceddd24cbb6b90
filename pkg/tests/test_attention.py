import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egomotion import gradcore as gc
from egomotion.attention import (DENOM_EPS, GraphTransformerBlock, RelTemporalLayer, StreamState,
                                 TemporalBlock, rope_matrix, rope_rotate, stream_attention_step,
                                 windowed_relative_attention)
from egomotion.skeleton import default_skeleton


def brute_force(layer, x, offset=0):
    """Direct double loop with absolute rotation matrices R_j, R_i (frames counted from offset)."""
    def lin(m, a):
        return a @ m.weight.data + m.bias.data

    def pos(a):
        return np.where(a > 0, a + 1.0, np.exp(a))

    T = len(x)
    H, Dh = layer.heads, layer.head_dim
    q = pos(lin(layer.theta, x)).reshape(T, H, Dh)
    k = pos(lin(layer.rho, x)).reshape(T, H, Dh)
    v = lin(layer.value, x).reshape(T, H, Dh)
    out = np.zeros((T, H, Dh))
    for j in range(T):
        Rj = rope_matrix(j + offset, Dh, layer.base)
        for h in range(H):
            num, den = np.zeros(Dh), 0.0
            for i in range(max(0, j - layer.ws), j + 1):
                Ri = rope_matrix(i + offset, Dh, layer.base)
                num += (Rj @ q[j, h]) @ (Ri @ k[i, h]) * v[i, h]
                den += q[j, h] @ k[i, h]
            out[j, h] = num / (den + DENOM_EPS)
    return lin(layer.out, out.reshape(T, H * Dh))


def make_layer(d_model=8, heads=2, ws=2, seed=0, dtype=np.float64):
    return RelTemporalLayer(d_model, heads, ws, np.random.default_rng(seed), dtype)


# -- rope --------------------------------------------------------------------------
def test_rope_identity_and_one_radian():
    x = np.random.default_rng(0).normal(size=6)
    np.testing.assert_array_equal(rope_rotate(x, 0), x)
    np.testing.assert_allclose(rope_rotate(np.array([1.0, 0.0]), 1), [np.cos(1.0), np.sin(1.0)], atol=1e-15)


def test_rope_relative_composition():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=4), rng.normal(size=4)
    lhs = rope_rotate(a, 3) @ rope_rotate(b, 7)
    rhs = a @ rope_rotate(b, 4)
    assert abs(lhs - rhs) < 1e-12
    np.testing.assert_allclose(rope_matrix(3, 4) @ a, rope_rotate(a, 3), atol=1e-15)


def test_rope_odd_dim_rejected():
    with pytest.raises(ValueError):
        rope_rotate(np.ones(3), 1)
    with pytest.raises(ValueError):
        RelTemporalLayer(6, 2, 2, np.random.default_rng(0))   # head dim 3


# -- offline attention ---------------------------------------------------------------
def test_window_zero_returns_values():
    layer = make_layer(ws=0)
    x = np.random.default_rng(2).normal(size=(6, 8))
    out = windowed_relative_attention(layer, x).data
    v = x @ layer.value.weight.data + layer.value.bias.data
    q = np.where((z := x @ layer.theta.weight.data + layer.theta.bias.data) > 0, z + 1, np.exp(z))
    k = np.where((z := x @ layer.rho.weight.data + layer.rho.bias.data) > 0, z + 1, np.exp(z))
    d = (q * k).reshape(6, 2, 4).sum(-1, keepdims=True)
    # exact self weight is d / (d + eps); v_j itself when eps -> 0
    expect = (v.reshape(6, 2, 4) * (d / (d + DENOM_EPS))).reshape(6, 8)
    np.testing.assert_allclose(out, expect @ layer.out.weight.data + layer.out.bias.data, rtol=1e-12)
    np.testing.assert_allclose(out, v @ layer.out.weight.data + layer.out.bias.data, rtol=1e-5)


def test_matches_brute_force_spec_example():
    layer = make_layer(d_model=2, heads=1, ws=2, seed=3)
    x = np.random.default_rng(4).normal(size=(5, 2))
    out = windowed_relative_attention(layer, x).data
    ref = brute_force(layer, x)
    assert np.abs(out - ref).max() / np.abs(ref).max() < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.sampled_from([(2, 1), (4, 1), (4, 2), (8, 2), (8, 4), (6, 3)]),
       st.integers(0, 6), st.integers(0, 2**31 - 1))
def test_property_brute_force_and_shift(T, dims, ws, seed):
    d_model, heads = dims
    layer = make_layer(d_model, heads, ws, seed)
    x = np.random.default_rng(seed + 1).normal(size=(T, d_model))
    out = windowed_relative_attention(layer, x).data
    scale = max(np.abs(out).max(), 1e-12)
    assert np.abs(out - brute_force(layer, x)).max() / scale < 1e-10
    assert np.abs(out - brute_force(layer, x, offset=977)).max() / scale < 1e-10


def test_causality_bitwise():
    layer = make_layer(16, 4, 3, seed=5, dtype=np.float32)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(20, 16)).astype(np.float32)
    base = windowed_relative_attention(layer, x).data
    for j in (0, 7, 18):
        y = x.copy()
        y[j + 1:] = rng.normal(size=y[j + 1:].shape) * 10
        out = windowed_relative_attention(layer, y).data
        assert out[:j + 1].tobytes() == base[:j + 1].tobytes()


def test_batched_equals_unbatched():
    layer = make_layer(8, 2, 3, seed=7)
    x = np.random.default_rng(8).normal(size=(3, 10, 8))
    batched = windowed_relative_attention(layer, x).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], windowed_relative_attention(layer, x[b]).data, atol=1e-14)


def test_non_finite_rejected():
    x = np.ones((4, 8))
    x[2, 1] = np.nan
    with pytest.raises(FloatingPointError):
        windowed_relative_attention(make_layer(), x)


def test_length_invariance():
    rng = np.random.default_rng(9)
    blocks = [TemporalBlock(8, 2, 3, rng, np.float64) for _ in range(2)]
    x = rng.normal(size=(40, 8))

    def run(seq):
        h = gc.Tensor(seq)
        for b in blocks:
            h = b(h)
        return h.data

    full = run(x)
    L, ws = 2, 3
    for j in range(ws * L + 1, 40, 5):
        window = run(x[j - ws * L:j + 1])
        assert np.abs(window[-1] - full[j]).max() < 1e-6


def test_attention_gradient_check():
    layer = make_layer(8, 2, 2, seed=10)
    x = gc.Tensor(np.random.default_rng(11).normal(size=(5, 8)), requires_grad=True)
    w = np.random.default_rng(12).normal(size=(5, 8))
    f = lambda *params: (windowed_relative_attention(layer, x) * w).sum()
    assert gc.finite_difference_check(f, [x] + layer.parameters(), h=1e-6) < 1e-6


# -- streaming -------------------------------------------------------------------------
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
def test_stream_matches_offline(dtype, tol):
    layer = make_layer(16, 2, 5, seed=13, dtype=dtype)
    x = np.random.default_rng(14).normal(size=(100, 16)).astype(dtype)
    offline = windowed_relative_attention(layer, x).data
    state = StreamState()
    with gc.no_grad():
        rows = [stream_attention_step(layer, state, x[t:t + 1]).data[0] for t in range(100)]
    assert np.abs(np.stack(rows) - offline).max() < tol
    np.testing.assert_allclose(rows[0], offline[0], atol=tol)


def test_stream_buffer_eviction():
    layer = make_layer(8, 2, 4)
    state = StreamState()
    for t in range(4 + 5):
        stream_attention_step(layer, state, np.ones((1, 8)) * t)
    assert len(state.slots["attn"]) == 5


# -- graph transformer block -----------------------------------------------------------------
def _ln(a, eps=1e-5):
    mu = a.mean(-1, keepdims=True)
    return (a - mu) / np.sqrt(a.var(-1, keepdims=True) + eps)


def test_graph_block_identity_adjacency_uniform_attention():
    rng = np.random.default_rng(15)
    N, D = 5, 8
    blk = GraphTransformerBlock(D, 2, np.eye(N), rng, np.float64)
    for m in (blk.q, blk.k):
        m.weight.data[:] = 0
        m.bias.data[:] = 0
    x = rng.normal(size=(N, D))

    def lin(m, a):
        return a @ m.weight.data + m.bias.data

    g = lin(blk.gconv, x)
    h = _ln(x + g / (1 + np.exp(-g)))
    attn = np.broadcast_to(lin(blk.v, h).mean(0), (N, D))
    ref = _ln(h + lin(blk.o, attn))
    np.testing.assert_allclose(blk(x).data, ref, atol=1e-12)


def test_graph_block_zero_input_finite_deterministic():
    skel = default_skeleton()
    A = skel.adjacency(skel.subset("body"))
    blk = GraphTransformerBlock(16, 4, A, np.random.default_rng(16), np.float64)
    a = blk(np.zeros((17, 16))).data
    b = blk(np.zeros((17, 16))).data
    assert np.all(np.isfinite(a)) and a.tobytes() == b.tobytes()
    np.testing.assert_allclose(a.mean(-1), 0.0, atol=1e-12)


def test_graph_block_permutation_equivariance():
    skel = default_skeleton()
    A = skel.adjacency(skel.subset("body"))
    rng = np.random.default_rng(17)
    blk = GraphTransformerBlock(16, 4, A, rng, np.float64)
    x = rng.normal(size=(2, 17, 16))
    perm = rng.permutation(17)
    out = blk(x).data
    out_p = blk(x[:, perm], adjacency=A[np.ix_(perm, perm)]).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)


def test_graph_block_gradient():
    rng = np.random.default_rng(18)
    blk = GraphTransformerBlock(8, 2, default_skeleton().adjacency([0, 1, 2, 3]), rng, np.float64)
    x = gc.Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    w = rng.normal(size=(4, 8))
    f = lambda *p: (blk(x) * w).sum()
    # the key bias shifts every score of a query equally, so its gradient is exactly zero
    params = [p for n, p in blk.named_parameters() if n != "k.bias"]
    assert gc.finite_difference_check(f, [x] + params, h=1e-5) < 1e-6
    blk.zero_grad()
    blk(x).sum().backward()
    assert np.abs(blk.k.bias.grad).max() < 1e-12
