import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptmil import numerics
from promptmil.errors import ContractViolationError, DegenerateInputError


class TestMatmul:
    def test_scalar_product(self):
        assert numerics.matmul([[2.0]], [[3.0]]) == np.array([[6.0]])

    def test_identity(self):
        m = np.array([[1.5, -2.0], [0.25, 7.0]])
        np.testing.assert_array_equal(numerics.matmul(np.eye(2), m), m)

    def test_hand_computed(self):
        out = numerics.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]])
        np.testing.assert_array_equal(out, [[17.0], [39.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolationError):
            numerics.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(ContractViolationError):
            numerics.matmul([[np.nan]], [[1.0]])


class TestSoftmaxColumns:
    def test_equal_logits(self):
        out = numerics.softmax_columns([[0.0], [0.0]])
        np.testing.assert_allclose(out, [[0.5], [0.5]])

    def test_closed_form(self):
        out = numerics.softmax_columns([[math.log(2.0)], [0.0]])
        np.testing.assert_allclose(out, [[2.0 / 3.0], [1.0 / 3.0]], atol=1e-15)

    def test_random_columns_sum_to_one(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(4, 3))
        out = numerics.softmax_columns(m)
        # independent oracle: direct summation per column
        for k in range(3):
            assert abs(sum(out[j, k] for j in range(4)) - 1.0) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(
            np.float64,
            st.tuples(st.integers(1, 6), st.integers(1, 5)),
            elements=st.floats(-1e4, 1e4, allow_nan=False),
        )
    )
    def test_column_sums_property(self, m):
        out = numerics.softmax_columns(m)
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)
        assert np.all(out >= 0.0) and np.all(out <= 1.0)

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(
            np.float64,
            st.tuples(st.integers(2, 6), st.integers(1, 5)),
            elements=st.floats(-15, 15, allow_nan=False),
        )
    )
    def test_strictly_open_interval_for_bounded_logits(self, m):
        # similarity logits in pooling are cosines in [-1, 1]; no rounding to 0/1
        out = numerics.softmax_columns(m)
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_stabilized_for_large_entries(self):
        out = numerics.softmax_columns([[1e4], [-1e4]])
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)


class TestCosine:
    def test_identical(self):
        assert numerics.cosine([1.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert numerics.cosine([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)

    def test_45_degrees(self):
        # 1/sqrt(2) by hand
        assert numerics.cosine([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.7071, abs=1e-4)

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateInputError):
            numerics.cosine([0.0, 0.0], [1.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, 4, elements=st.floats(-10, 10)).filter(
            lambda v: np.linalg.norm(v) > 1e-3
        ),
        arrays(np.float64, 4, elements=st.floats(-10, 10)).filter(
            lambda v: np.linalg.norm(v) > 1e-3
        ),
        st.floats(0.1, 50.0),
        st.floats(0.1, 50.0),
    )
    def test_symmetric_and_scale_invariant(self, a, b, alpha, beta):
        c = numerics.cosine(a, b)
        assert numerics.cosine(b, a) == pytest.approx(c, abs=1e-12)
        assert numerics.cosine(alpha * a, beta * b) == pytest.approx(c, abs=1e-12)

    def test_self_cosine_is_one(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            v = rng.normal(size=8)
            assert numerics.cosine(v, v) == pytest.approx(1.0, abs=1e-12)


class TestClassProbabilities:
    def test_symmetry(self):
        for tau in (0.01, 0.1, 1.0):
            out = numerics.class_probabilities([0.3, 0.3], tau)
            np.testing.assert_allclose(out, [0.5, 0.5])

    def test_direct_evaluation_tau_01(self):
        # exp(0.6/0.1) / (exp(0.6/0.1) + exp(0.4/0.1)) computed directly
        e1, e2 = math.exp(6.0), math.exp(4.0)
        out = numerics.class_probabilities([0.6, 0.4], 0.1)
        np.testing.assert_allclose(out, [e1 / (e1 + e2), e2 / (e1 + e2)], atol=1e-12)
        np.testing.assert_allclose(out, [0.8808, 0.1192], atol=1e-4)

    def test_direct_evaluation_tau_001(self):
        out = numerics.class_probabilities([1.0, 0.0], 0.01)
        assert out[0] == pytest.approx(1.0, abs=1e-10)
        assert out[1] == pytest.approx(math.exp(-100.0), rel=1e-6)
        assert out[1] == pytest.approx(3.7e-44, rel=1e-2)

    def test_invariant_to_constant_shift(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            sims = rng.normal(size=5)
            tau = float(rng.uniform(0.01, 2.0))
            c = float(rng.uniform(-100, 100))
            a = numerics.class_probabilities(sims, tau)
            b = numerics.class_probabilities(sims + c, tau)
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_nonpositive_tau_rejected(self):
        with pytest.raises(ContractViolationError):
            numerics.class_probabilities([1.0, 0.0], 0.0)
        with pytest.raises(ContractViolationError):
            numerics.class_probabilities([1.0, 0.0], -0.1)


class TestCrossEntropy:
    def test_certain_correct(self):
        assert numerics.cross_entropy([1.0, 0.0], 0) == 0.0

    def test_half(self):
        assert numerics.cross_entropy([0.5, 0.5], 0) == pytest.approx(math.log(2.0))
        assert numerics.cross_entropy([0.5, 0.5], 0) == pytest.approx(0.6931, abs=1e-4)

    def test_clamped_zero(self):
        # -ln(1e-12) computed directly
        assert numerics.cross_entropy([0.0, 1.0], 0) == pytest.approx(-math.log(1e-12))
        assert numerics.cross_entropy([0.0, 1.0], 0) == pytest.approx(27.631, abs=1e-3)

    def test_nonnegative_and_zero_iff_certain(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            p = rng.dirichlet(np.ones(4))
            y = int(rng.integers(4))
            ce = numerics.cross_entropy(p, y)
            assert ce >= 0.0
            assert (ce == 0.0) == (p[y] == 1.0)

    def test_out_of_range_class(self):
        with pytest.raises(ContractViolationError):
            numerics.cross_entropy([0.5, 0.5], 2)


class TestGradCheck:
    def test_quadratic_exact(self):
        def f(x):
            return float(x[0] ** 2), [2.0 * x[0]]

        err = numerics.grad_check(f, [3.0], eps=1e-5)
        assert err < 1e-9

    def test_softmax_ce_closed_form(self):
        # analytic gradient of CE(softmax(logits), y) is p - onehot(y)
        rng = np.random.default_rng(5)
        for _ in range(10):
            logits0 = rng.normal(size=4)
            y = int(rng.integers(4))

            def f(logits, y=y):
                p = numerics.class_probabilities(logits, tau=1.0)
                g = p.copy()
                g[y] -= 1.0
                return numerics.cross_entropy(p, y), g

            assert numerics.grad_check(f, logits0, eps=1e-5) < 1e-6

    def test_wrong_gradient_detected(self):
        def f(x):
            return float(x[0] ** 2), [2.0 * x[0] + 0.5]

        assert numerics.grad_check(f, [3.0], eps=1e-5) > 1e-2

    def test_eps_bounds(self):
        def f(x):
            return float(x[0]), [1.0]

        with pytest.raises(ContractViolationError):
            numerics.grad_check(f, [1.0], eps=1e-2)
        with pytest.raises(ContractViolationError):
            numerics.grad_check(f, [1.0], eps=1e-8)

    def test_non_finite_objective(self):
        def f(x):
            return float("nan"), [0.0]

        with pytest.raises(DegenerateInputError):
            numerics.grad_check(f, [1.0], eps=1e-5)
