import numpy as np
import pytest

from oracles import head_attention
from parafuse.attention import AttentionParams, cross_attention, init_attention
from parafuse.tensor import ShapeError, Tensor


def params_np(p: AttentionParams):
    return p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data


def test_init_is_deterministic():
    a, b = init_attention(6, 5, 8, 2, seed=3), init_attention(6, 5, 8, 2, seed=3)
    for x, y in zip(params_np(a), params_np(b)):
        assert np.array_equal(x, y)


def test_init_divisibility():
    with pytest.raises(ValueError, match="divisible"):
        init_attention(4, 4, 8, 3, seed=0)


def test_default_toy_shapes():
    p = init_attention(64, 48, 64, 4, seed=0)
    assert [w.shape for w in (p.w_q, p.w_k, p.w_v, p.w_o)] == [(64, 64), (48, 64), (48, 64), (64, 64)]


def test_init_bound():
    p = init_attention(16, 9, 8, 2, seed=1)
    assert np.abs(p.w_q.data).max() <= 1 / 4 and np.abs(p.w_k.data).max() <= 1 / 3


def test_matches_per_head_oracle():
    rng = np.random.default_rng(0)
    p = init_attention(6, 5, 8, 4, seed=1)
    q, kv = rng.normal(size=(3, 6)), rng.normal(size=(5, 5))
    out = cross_attention(Tensor(q), Tensor(kv), p).data
    np.testing.assert_allclose(out, head_attention(q, kv, *params_np(p), heads=4), rtol=0, atol=1e-12)


def test_single_key_is_query_independent():
    rng = np.random.default_rng(1)
    p = init_attention(6, 5, 8, 2, seed=2)
    kv = rng.normal(size=(1, 5))
    out = cross_attention(Tensor(rng.normal(size=(4, 6))), Tensor(kv), p).data
    expected = kv @ p.w_v.data @ p.w_o.data
    np.testing.assert_allclose(out, np.repeat(expected, 4, axis=0), atol=1e-12)


def test_duplicate_keys_match_single_key():
    rng = np.random.default_rng(2)
    p = init_attention(6, 5, 8, 2, seed=3)
    q, kv = Tensor(rng.normal(size=(3, 6))), rng.normal(size=(1, 5))
    one = cross_attention(q, Tensor(kv), p).data
    two = cross_attention(q, Tensor(np.repeat(kv, 2, axis=0)), p).data
    np.testing.assert_allclose(one, two, atol=1e-12)


def test_key_permutation_invariance():
    rng = np.random.default_rng(3)
    p = init_attention(6, 5, 8, 2, seed=4)
    q, kv = Tensor(rng.normal(size=(3, 6))), rng.normal(size=(7, 5))
    perm = rng.permutation(7)
    np.testing.assert_allclose(cross_attention(q, Tensor(kv), p).data,
                               cross_attention(q, Tensor(kv[perm]), p).data, atol=1e-12)


def test_output_in_convex_hull_of_values():
    rng = np.random.default_rng(4)
    d = 4
    eye = Tensor(np.eye(d))
    p = AttentionParams(w_q=Tensor(rng.normal(size=(d, d))), w_k=Tensor(rng.normal(size=(d, d))),
                        w_v=eye, w_o=eye, heads=1)
    kv = rng.normal(size=(5, d))
    out = cross_attention(Tensor(rng.normal(size=(6, d))), Tensor(kv), p).data
    assert np.all(out <= kv.max(axis=0) + 1e-12) and np.all(out >= kv.min(axis=0) - 1e-12)


def test_output_length_and_dim():
    p = init_attention(6, 5, 8, 2, seed=0, d_out=3)
    out = cross_attention(Tensor(np.zeros((9, 6))), Tensor(np.zeros((2, 5))), p)
    assert out.shape == (9, 3)


def test_dimension_mismatch():
    p = init_attention(6, 5, 8, 2, seed=0)
    with pytest.raises(ShapeError):
        cross_attention(Tensor(np.zeros((3, 5))), Tensor(np.zeros((2, 5))), p)
