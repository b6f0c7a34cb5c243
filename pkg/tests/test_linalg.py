import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from uatlite.linalg import (
    InvalidRateError,
    RngStream,
    ShapeError,
    as_matrix,
    column_std,
    matmul,
    sample_dropout_mask,
    softmax_rows,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]]), [[3, 4], [5, 6]])

    def test_row_times_column(self):
        np.testing.assert_array_equal(matmul([[1, 2]], [[3], [4]]), [[11]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_associativity(self, n, k, m, p, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(n, k)), rng.normal(size=(k, m)), rng.normal(size=(m, p))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)


def test_as_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    assert as_matrix([1, 2]).shape == (1, 2)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])

    def test_hand_value(self):
        np.testing.assert_allclose(softmax_rows([[1.0, 0.5]]), [[0.6225, 0.3775]], atol=1e-3)

    def test_large_logits_are_stable(self):
        p = softmax_rows([[1000.0, 999.0]])
        assert np.all(np.isfinite(p))
        assert abs(p.sum() - 1.0) < 1e-12

    def test_masked_entries_get_zero(self):
        p = softmax_rows([[0.0, -np.inf, 1.0]])
        assert p[0, 1] == 0.0
        assert abs(p.sum() - 1) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8), elements=finite))
    def test_rows_sum_to_one(self, m):
        p = softmax_rows(m)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


class TestRngStream:
    def test_counter_is_the_only_state(self):
        a, b = RngStream(7), RngStream(7)
        x1 = a.generator().random(4)
        x2 = a.generator().random(4)
        assert a.counter == 2
        np.testing.assert_array_equal(b.generator().random(4), x1)
        np.testing.assert_array_equal(RngStream(7, counter=1).generator().random(4), x2)
        assert not np.array_equal(x1, x2)

    def test_forks_are_independent_of_parent_state(self):
        a = RngStream(3)
        child = a.fork(1, 2).generator().random(3)
        a.generator()
        np.testing.assert_array_equal(a.fork(1, 2).generator().random(3), child)
        assert not np.array_equal(a.fork(2, 1).generator().random(3), child)

    def test_derive_seed_pure(self):
        assert RngStream(5).derive_seed(1, 2) == RngStream(5).derive_seed(1, 2)
        assert RngStream(5).derive_seed(1, 2) != RngStream(5).derive_seed(2, 1)


class TestDropoutMask:
    def test_rate_zero_keeps_everything(self):
        m = sample_dropout_mask(RngStream(0), (3, 4), 0.0)
        assert m.keep.all() and m.scale == 1.0
        x = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(m.apply(x), x)

    def test_keep_fraction(self):
        m = sample_dropout_mask(RngStream(1), (100, 100), 0.3)
        assert abs(m.keep.mean() - 0.70) <= 0.02
        assert m.scale == 1.0 / (1.0 - 0.3)

    def test_determinism(self):
        a = sample_dropout_mask(RngStream(9, counter=4), (5, 6), 0.4)
        b = sample_dropout_mask(RngStream(9, counter=4), (5, 6), 0.4)
        np.testing.assert_array_equal(a.keep, b.keep)

    @pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
    def test_invalid_rate(self, rate):
        with pytest.raises(InvalidRateError):
            sample_dropout_mask(RngStream(0), (2, 2), rate)

    def test_inverted_dropout_is_unbiased(self):
        x = np.linspace(0.5, 2.0, 8)
        rng = RngStream(11)
        total = np.zeros_like(x)
        for _ in range(10_000):
            total += sample_dropout_mask(rng, x.shape, 0.3).apply(x)
        np.testing.assert_allclose(total / 10_000, x, rtol=0.02)

    def test_apply_matches_multiplier(self):
        m = sample_dropout_mask(RngStream(2), (4, 4), 0.5)
        x = np.ones((4, 4))
        np.testing.assert_array_equal(m.apply(x), x * m.as_multiplier())


class TestColumnStd:
    def test_identical_samples(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(column_std([a, a.copy()]), np.zeros((2, 3)))

    def test_population_convention(self):
        np.testing.assert_array_equal(column_std([[[0.0]], [[2.0]]]), [[1.0]])

    def test_single_sample(self):
        np.testing.assert_array_equal(column_std([np.ones((2, 2))]), np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            column_std([np.ones((2, 2)), np.ones((2, 3))])
