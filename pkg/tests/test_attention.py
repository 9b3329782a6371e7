import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from eatn import tensor as T
from eatn.attention import (AttentionState, PositionalEncoding, ProjectionSet, attention_logits,
                            build_causal_mask, masked_row_softmax, project_qk, relative_bias_1d,
                            relative_bias_2d, relative_index_1d, scaled_dot_product_logits,
                            sinusoidal_encoding)
from eatn.errors import ConfigError, ContractError, DimensionError
from eatn.tensor import Tensor

from oracles import logits_loop, matmul_loop, rel1d_loop, rel2d_loop, softmax_row


def state(logits, mask=None):
    logits = np.asarray(logits, dtype=np.float64)
    if mask is None:
        mask = np.zeros(logits.shape[:2], dtype=bool)
    return AttentionState(Tensor(logits), mask)


# -- projections --------------------------------------------------------------

def test_project_identity():
    X = np.eye(4)
    Q, K = project_qk(Tensor(X), ProjectionSet(Tensor(np.eye(4)), Tensor(np.eye(4)), 2))
    assert Q.shape == (4, 2, 2)
    assert np.array_equal(Q.data, np.eye(4).reshape(4, 2, 2))


def test_project_zero_weights(rng):
    Q, _ = project_qk(Tensor(rng.standard_normal((3, 4))),
                      ProjectionSet(Tensor(np.zeros((4, 4))), Tensor(np.ones((4, 4))), 2))
    assert np.array_equal(Q.data, np.zeros((3, 2, 2)))


def test_project_matches_matmul_then_slice():
    rng = np.random.default_rng(21)
    X, WQ, WK = rng.standard_normal((5, 6)), rng.standard_normal((6, 6)), rng.standard_normal((6, 6))
    Q, K = project_qk(Tensor(X), ProjectionSet(Tensor(WQ), Tensor(WK), 3))
    ref_q, ref_k = matmul_loop(X, WQ), matmul_loop(X, WK)
    for k in range(3):
        np.testing.assert_allclose(Q.data[:, k, :], ref_q[:, 2 * k:2 * k + 2], atol=1e-13)
        np.testing.assert_allclose(K.data[:, k, :], ref_k[:, 2 * k:2 * k + 2], atol=1e-13)


def test_project_width_mismatch():
    with pytest.raises(DimensionError):
        project_qk(Tensor(np.ones((3, 5))), ProjectionSet(Tensor(np.ones((4, 4))), Tensor(np.ones((4, 4))), 2))


def test_projection_heads_must_divide():
    with pytest.raises(ConfigError):
        ProjectionSet(Tensor(np.ones((4, 6))), Tensor(np.ones((4, 6))), 4)


# -- logits -------------------------------------------------------------------

def test_logits_identity():
    Q = Tensor(np.eye(2).reshape(2, 1, 2))
    out = scaled_dot_product_logits(Q, Q, 1).data[..., 0]
    assert np.array_equal(out, np.eye(2))


def test_logits_zero_queries(rng):
    out = scaled_dot_product_logits(Tensor(np.zeros((3, 2, 4))), Tensor(rng.standard_normal((3, 2, 4))), 4)
    assert np.array_equal(out.data, np.zeros((3, 3, 2)))


def test_logits_match_double_loop():
    rng = np.random.default_rng(8)
    Q, K = rng.standard_normal((3, 1, 4)), rng.standard_normal((3, 1, 4))
    np.testing.assert_allclose(scaled_dot_product_logits(Tensor(Q), Tensor(K), 4).data,
                               logits_loop(Q, K, 4), atol=1e-14)


def test_logits_multihead_rectangular(rng):
    Q, K = rng.standard_normal((2, 3, 4)), rng.standard_normal((5, 3, 4))
    np.testing.assert_allclose(scaled_dot_product_logits(Tensor(Q), Tensor(K), 4).data,
                               logits_loop(Q, K, 4), atol=1e-13)


@pytest.mark.parametrize("d", [0, -1])
def test_logits_nonpositive_d(d):
    with pytest.raises(ConfigError):
        scaled_dot_product_logits(Tensor(np.ones((2, 1, 1))), Tensor(np.ones((2, 1, 1))), d)


@given(st.floats(-5, 5), st.integers(0, 2 ** 32 - 1))
def test_logits_bilinear(c, seed):
    rng = np.random.default_rng(seed)
    Q, K = rng.standard_normal((3, 2, 4)), rng.standard_normal((4, 2, 4))
    base = scaled_dot_product_logits(Tensor(Q), Tensor(K), 4).data
    scaled = scaled_dot_product_logits(Tensor(c * Q), Tensor(K), 4).data
    np.testing.assert_allclose(scaled, c * base, rtol=1e-12, atol=1e-12)


# -- relative positions ---------------------------------------------------------

def rel1(table, r):
    return PositionalEncoding("relative_1d", r, (Tensor(table),))


def test_rel1d_zero_embeddings(rng):
    out = relative_bias_1d(Tensor(rng.standard_normal((4, 2, 3))), rel1(np.zeros((5, 3)), 2))
    assert np.array_equal(out.data, np.zeros((4, 4, 2)))


def test_rel1d_zero_query_row(rng):
    Q = rng.standard_normal((4, 2, 3))
    Q[2] = 0.0
    out = relative_bias_1d(Tensor(Q), rel1(rng.standard_normal((5, 3)), 2)).data
    assert np.array_equal(out[2], np.zeros((4, 2)))


def test_rel1d_matches_loop_with_clipping():
    rng = np.random.default_rng(4)
    Q, E = rng.standard_normal((4, 1, 2)), rng.standard_normal((5, 2))
    np.testing.assert_allclose(relative_bias_1d(Tensor(Q), rel1(E, 2)).data, rel1d_loop(Q, E, 2), atol=1e-14)


def test_rel1d_wrong_mode(rng):
    enc = PositionalEncoding("relative_2d", 1, (Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2)))), (2, 2))
    with pytest.raises(ConfigError):
        relative_bias_1d(Tensor(np.zeros((4, 1, 2))), enc)


@given(st.integers(1, 9), st.integers(0, 4))
def test_rel1d_clipping_idempotent(n, r):
    idx = relative_index_1d(n, n, r)
    for i in range(n):
        for j in range(n):
            assert idx[i, j] == max(-r, min(r, i - j)) + r
            # an offset past the radius reads the boundary row
            if abs(i - j) > r:
                assert idx[i, j] in (0, 2 * r)


def rel2(eh, ew, r, grid):
    return PositionalEncoding("relative_2d", r, (Tensor(eh), Tensor(ew)), grid)


def test_rel2d_zero_tables(rng):
    out = relative_bias_2d(Tensor(rng.standard_normal((6, 2, 3))), rel2(np.zeros((5, 3)), np.zeros((5, 3)), 2, (2, 3)), 2, 3)
    assert np.array_equal(out.data, np.zeros((6, 6, 2)))


def test_rel2d_matches_loop():
    rng = np.random.default_rng(6)
    Q, EH, EW = rng.standard_normal((6, 2, 3)), rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    out = relative_bias_2d(Tensor(Q), rel2(EH, EW, 1, (2, 3)), 2, 3).data
    np.testing.assert_allclose(out, rel2d_loop(Q, EH, EW, 2, 3, 1), atol=1e-14)


def test_rel2d_single_row_grid_is_1d_bias(rng):
    # the width offset is w(j) - w(i), the 1D offset is i - j, so the tables
    # line up after reversing the row order
    Q, E = rng.standard_normal((5, 2, 3)), rng.standard_normal((9, 3))
    two_d = relative_bias_2d(Tensor(Q), rel2(np.zeros((9, 3)), E[::-1].copy(), 4, (1, 5)), 1, 5).data
    one_d = relative_bias_1d(Tensor(Q), rel1(E, 4)).data
    np.testing.assert_allclose(two_d, one_d, atol=1e-14)


def test_rel2d_symmetric_table_reduces_without_reversal(rng):
    Q = rng.standard_normal((5, 2, 3))
    half = rng.standard_normal((5, 3))
    E = np.concatenate([half[:0:-1], half])  # e[o] == e[-o]
    two_d = relative_bias_2d(Tensor(Q), rel2(np.zeros((9, 3)), E, 4, (1, 5)), 1, 5).data
    one_d = relative_bias_1d(Tensor(Q), rel1(E, 4)).data
    np.testing.assert_allclose(two_d, one_d, atol=1e-14)


def test_rel2d_grid_mismatch(rng):
    with pytest.raises(DimensionError):
        relative_bias_2d(Tensor(np.zeros((5, 1, 2))), rel2(np.zeros((5, 2)), np.zeros((5, 2)), 2, (2, 3)), 2, 3)


def test_rel2d_requires_grid():
    with pytest.raises(ConfigError):
        PositionalEncoding("relative_2d", 1, (Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2)))))


def test_relative_table_row_count_checked():
    with pytest.raises(DimensionError):
        PositionalEncoding("relative_1d", 2, (Tensor(np.zeros((4, 2))),))


def test_attention_logits_adds_relative_term(rng):
    Q, K, E = rng.standard_normal((4, 2, 3)), rng.standard_normal((4, 2, 3)), rng.standard_normal((7, 3))
    out = attention_logits(Tensor(Q), Tensor(K), 3, rel1(E, 3)).data
    np.testing.assert_allclose(out, logits_loop(Q, K, 3) + rel1d_loop(Q, E, 3), atol=1e-13)


def test_sinusoidal_values():
    pe = sinusoidal_encoding(3, 4)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert pe[2, 0] == math.sin(2.0)
    assert pe[2, 3] == math.cos(2.0 / 100.0)


# -- softmax and masks ----------------------------------------------------------

def test_softmax_uniform():
    out = masked_row_softmax(state(np.zeros((2, 3, 1)))).data
    np.testing.assert_allclose(out, 1.0 / 3.0, rtol=0, atol=1e-16)


def test_softmax_single_allowed_column(rng):
    mask = np.array([[True, False, True], [False, True, True]])
    out = masked_row_softmax(state(rng.standard_normal((2, 3, 2)), mask)).data
    assert np.array_equal(out[0, :, 0], [0.0, 1.0, 0.0])
    assert np.array_equal(out[1, :, 1], [1.0, 0.0, 0.0])


def test_softmax_reference_row():
    out = masked_row_softmax(state(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))).data[0, :, 0]
    np.testing.assert_allclose(out, softmax_row([1.0, 2.0, 3.0]), rtol=1e-15, atol=1e-16)


def test_softmax_fully_masked_row_names_row():
    mask = np.array([[False, False], [True, True]])
    with pytest.raises(ContractError, match="row 1"):
        masked_row_softmax(state(np.zeros((2, 2, 1)), mask))


def test_mask_shape_checked():
    with pytest.raises(DimensionError):
        AttentionState(Tensor(np.zeros((2, 3, 1))), np.zeros((3, 2), bool))


masks = st.integers(1, 6).flatmap(lambda n: st.tuples(
    hnp.arrays(np.float64, (n, 5, 2), elements=st.floats(-50, 50)),
    hnp.arrays(np.bool_, (n, 5)).map(lambda m: np.where(m.all(axis=1, keepdims=True), False, m)),
    hnp.arrays(np.float64, (n, 1, 1), elements=st.floats(-100, 100))))


@given(masks)
def test_softmax_rows_normalized_and_masked_zero(case):
    logits, mask, _ = case
    out = masked_row_softmax(state(logits, mask)).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(out[mask] == 0.0)


@given(masks)
def test_softmax_shift_invariant(case):
    logits, mask, shift = case
    a = masked_row_softmax(state(logits, mask)).data
    b = masked_row_softmax(state(logits + shift, mask)).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_softmax_ignores_masked_sentinels(rng):
    logits = rng.standard_normal((3, 3, 2))
    mask = build_causal_mask(3)
    poisoned = logits.copy()
    poisoned[mask] = 1e6
    np.testing.assert_array_equal(masked_row_softmax(state(logits, mask)).data,
                                  masked_row_softmax(state(poisoned, mask)).data)


def test_causal_mask_small():
    assert build_causal_mask(1).tolist() == [[False]]
    assert build_causal_mask(3).tolist() == [[False, True, True], [False, False, True], [False, False, False]]


@given(st.integers(1, 64))
def test_causal_mask_count(n):
    m = build_causal_mask(n)
    assert m.sum() == n * (n - 1) // 2
    i, j = np.nonzero(m)
    assert np.all(j > i)


def test_softmax_gradient(rng):
    from oracles import central_difference
    logits = rng.standard_normal((3, 3, 2))
    w = rng.standard_normal((3, 3, 2))
    mask = build_causal_mask(3)
    x = Tensor(logits.copy(), requires_grad=True)
    T.backward(T.sum_(T.mul(masked_row_softmax(AttentionState(x, mask)), Tensor(w))))
    num = central_difference(lambda a: float((masked_row_softmax(state(a, mask)).data * w).sum()), logits)
    np.testing.assert_allclose(x.grad, num, atol=1e-9)
    assert np.all(x.grad[mask] == 0.0)
