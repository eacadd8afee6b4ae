import numpy as np
import pytest
from numpy.testing import assert_allclose

from linmix.exceptions import ShapeError
from linmix.numerics import make_rng, rel_err
from linmix.oracle import (
    constant_channel_response,
    cumprod_causal_mask,
    masked_gated_attention_dense,
    softmax_attention,
    vector_gated_attention_dense,
)


def test_softmax_attention_single_token():
    rng = make_rng(0)
    x = rng.standard_normal((1, 4))
    wq = rng.standard_normal((4, 3))
    wk = rng.standard_normal((4, 3))
    wv = rng.standard_normal((4, 4))
    assert_allclose(softmax_attention(x, wq, wk, wv), x @ wv, rtol=1e-14)


def test_softmax_attention_zero_projections_give_uniform_mixing():
    rng = make_rng(1)
    x = rng.standard_normal((6, 4))
    wv = rng.standard_normal((4, 4))
    y = softmax_attention(x, np.zeros((4, 3)), np.zeros((4, 3)), wv)
    want = np.tile((x @ wv).mean(axis=0), (6, 1))
    assert rel_err(y, want) <= 1e-14


def test_softmax_attention_matches_unrolled_loops():
    rng = make_rng(2)
    n, d, d_attn = 5, 4, 3
    x = rng.standard_normal((n, d))
    wq = rng.standard_normal((d, d_attn))
    wk = rng.standard_normal((d, d_attn))
    wv = rng.standard_normal((d, d))
    q, k, v = x @ wq, x @ wk, x @ wv
    want = np.zeros((n, d))
    for i in range(n):
        logits = [sum(q[i, u] * k[j, u] for u in range(d_attn)) / np.sqrt(d_attn)
                  for j in range(n)]
        mx = max(logits)
        weights = [np.exp(l - mx) for l in logits]
        z = sum(weights)
        for j in range(n):
            want[i] += (weights[j] / z) * v[j]
    assert rel_err(softmax_attention(x, wq, wk, wv), want) <= 1e-12


def test_softmax_attention_shape_error():
    with pytest.raises(ShapeError):
        softmax_attention(np.ones((3, 4)), np.ones((5, 2)), np.ones((5, 2)), np.ones((4, 4)))


def test_cumprod_mask_unit_gates():
    m = cumprod_causal_mask(np.array([np.nan, 1.0, 1.0, 1.0]), 4).values
    assert_allclose(m, np.tril(np.ones((4, 4))))


def test_cumprod_mask_zero_gates_is_identity():
    m = cumprod_causal_mask(np.array([123.0, 0.0, 0.0, 0.0]), 4).values
    assert_allclose(m, np.eye(4))


def test_cumprod_mask_closed_form():
    m = cumprod_causal_mask(np.array([0.0, 0.5, 0.5]), 3).values
    assert_allclose(m, [[1, 0, 0], [0.5, 1, 0], [0.25, 0.5, 1]])


def test_cumprod_mask_diagonal_exactly_one_and_nonnegative():
    rng = make_rng(3)
    for _ in range(25):
        n = int(rng.integers(1, 20))
        a = rng.uniform(0, 1, n)
        m = cumprod_causal_mask(a, n).values
        assert np.array_equal(np.diag(m), np.ones(n))
        assert np.all(m >= 0)
        assert np.array_equal(np.triu(m, 1), np.zeros((n, n)))


def test_masked_attention_degenerate_gates():
    n, d, d_state = 5, 3, 2
    x = make_rng(4).standard_normal((n, d))
    ones = np.ones((n, d_state))
    y = masked_gated_attention_dense(ones, ones, x, np.ones((n, n)))
    want = np.tile(d_state * x.sum(axis=0), (n, 1))
    assert rel_err(y, want) <= 1e-14


def test_masked_attention_identity_mask_is_memoryless():
    rng = make_rng(5)
    n, d, d_state = 6, 3, 2
    c = rng.uniform(0.1, 1, (n, d_state))
    b = rng.uniform(0.1, 1, (n, d_state))
    x = rng.standard_normal((n, d))
    mask = cumprod_causal_mask(np.zeros(n), n)
    y = masked_gated_attention_dense(c, b, x, mask)
    want = np.stack([float(np.dot(c[i], b[i])) * x[i] for i in range(n)])
    assert rel_err(y, want) <= 1e-14


def test_vector_mask_with_shared_channels_collapses_bitwise():
    rng = make_rng(6)
    n, d, d_state = 7, 4, 3
    c = rng.uniform(0.1, 1, (n, d_state))
    b = rng.uniform(0.1, 1, (n, d_state))
    x = rng.standard_normal((n, d))
    m = rng.uniform(0, 1, (n, n))
    stack = np.broadcast_to(m, (d_state, n, n)).copy()
    y_vec = vector_gated_attention_dense(c, b, x, stack)
    y_scalar = masked_gated_attention_dense(c, b, x, m)
    assert np.array_equal(y_vec, y_scalar)


def test_vector_mask_single_channel():
    rng = make_rng(7)
    n, d = 5, 3
    c = rng.uniform(0.1, 1, (n, 1))
    b = rng.uniform(0.1, 1, (n, 1))
    x = rng.standard_normal((n, d))
    m = rng.uniform(0, 1, (1, n, n))
    y = vector_gated_attention_dense(c, b, x, m)
    want = np.zeros((n, d))
    for i in range(n):
        for j in range(n):
            want[i] += c[i, 0] * m[0, i, j] * b[j, 0] * x[j]
    assert rel_err(y, want) <= 1e-13


def test_constant_channel_response_row_stochastic():
    rng = make_rng(8)
    m = rng.uniform(0, 1, (6, 6))
    m /= m.sum(axis=1, keepdims=True)
    mu = rng.standard_normal(4)
    y = constant_channel_response(m, mu)
    assert rel_err(y, np.tile(mu, (6, 1))) <= 1e-12
    y2 = constant_channel_response(2.0 * m, mu)
    assert rel_err(y2, np.tile(2.0 * mu, (6, 1))) <= 1e-12


def test_constant_input_matches_constant_channel_oracle_bitwise():
    rng = make_rng(9)
    n, d, d_state = 8, 5, 3
    c = rng.uniform(0.1, 1, (n, d_state))
    b = rng.uniform(0.1, 1, (n, d_state))
    mask = rng.uniform(0, 1, (n, n))
    mu = rng.standard_normal(d)
    x = np.tile(mu, (n, 1))
    # effective mask entries computed with the same reduction the mixer uses
    m_eff = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            m_eff[i, j] = float(np.dot(c[i], mask[i, j] * b[j]))
    got = masked_gated_attention_dense(c, b, x, mask)
    want = constant_channel_response(m_eff, mu)
    assert np.array_equal(got, want)
