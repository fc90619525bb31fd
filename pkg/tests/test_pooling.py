import numpy as np
import pytest

from promptmil import numerics, pooling
from promptmil.errors import ContractViolationError, DegenerateInputError


def unit_rows(rng, n, m):
    return numerics.l2_normalize_rows(rng.normal(size=(n, m)))


class TestPromptGuidedPool:
    def test_single_instance(self):
        z = np.array([[0.6, 0.8]])
        P = np.eye(2)
        res = pooling.prompt_guided_pool(z, P)
        np.testing.assert_array_equal(res.W, np.ones((1, 2)))
        np.testing.assert_allclose(res.F, z[0], atol=1e-15)

    def test_hand_computed_identity_case(self):
        # Z = I2, P = I2: each weight column is softmax([1, 0]) resp. softmax([0, 1])
        res = pooling.prompt_guided_pool(np.eye(2), np.eye(2))
        np.testing.assert_allclose(
            res.W, [[0.731, 0.269], [0.269, 0.731]], atol=1e-3
        )
        np.testing.assert_allclose(res.F, [0.5, 0.5], atol=1e-12)

    def test_identical_instances_collapse(self):
        rng = np.random.default_rng(0)
        z = unit_rows(rng, 1, 6)
        Z = np.repeat(z, 5, axis=0)
        P = unit_rows(rng, 3, 6)
        res = pooling.prompt_guided_pool(Z, P)
        np.testing.assert_allclose(res.F, z[0], atol=1e-12)

    def test_columns_sum_to_one(self):
        rng = np.random.default_rng(1)
        res = pooling.prompt_guided_pool(unit_rows(rng, 7, 5), unit_rows(rng, 4, 5))
        np.testing.assert_allclose(res.W.sum(axis=0), 1.0, atol=1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        Z = unit_rows(rng, 9, 4)
        P = unit_rows(rng, 3, 4)
        perm = rng.permutation(9)
        a = pooling.prompt_guided_pool(Z, P)
        b = pooling.prompt_guided_pool(Z[perm], P)
        np.testing.assert_allclose(a.F, b.F, atol=1e-12)
        np.testing.assert_allclose(a.W[perm], b.W, atol=1e-12)

    def test_convex_hull_reconstruction(self):
        rng = np.random.default_rng(3)
        Z = unit_rows(rng, 6, 5)
        P = unit_rows(rng, 4, 5)
        res = pooling.prompt_guided_pool(Z, P)
        coeffs = res.W.mean(axis=1)
        assert np.all(coeffs >= 0.0)
        assert abs(coeffs.sum() - 1.0) < 1e-9
        np.testing.assert_allclose(coeffs @ Z, res.F, atol=1e-12)

    def test_non_unit_instances_rejected(self):
        with pytest.raises(ContractViolationError):
            pooling.prompt_guided_pool(np.array([[2.0, 0.0]]), np.eye(2))

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolationError):
            pooling.prompt_guided_pool(np.eye(3), np.eye(2))


class TestMeanMaxPool:
    def test_mean(self):
        np.testing.assert_allclose(
            pooling.mean_pool([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5]
        )

    def test_max(self):
        np.testing.assert_allclose(
            pooling.max_pool([[1.0, 0.0], [0.0, 1.0]]), [1.0, 1.0]
        )

    def test_single_row_identity(self):
        row = np.array([[0.3, -0.2, 0.5]])
        np.testing.assert_array_equal(pooling.mean_pool(row), row[0])
        np.testing.assert_array_equal(pooling.max_pool(row), row[0])

    def test_max_idempotent_on_duplicates(self):
        row = np.array([0.3, -0.2, 0.5])
        np.testing.assert_array_equal(pooling.max_pool(np.stack([row, row])), row)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        Z = rng.normal(size=(8, 3))
        perm = rng.permutation(8)
        np.testing.assert_allclose(pooling.mean_pool(Z), pooling.mean_pool(Z[perm]), atol=1e-12)
        np.testing.assert_array_equal(pooling.max_pool(Z), pooling.max_pool(Z[perm]))

    def test_empty_bag_rejected(self):
        with pytest.raises(DegenerateInputError):
            pooling.mean_pool(np.zeros((0, 3)))
        with pytest.raises(DegenerateInputError):
            pooling.max_pool(np.zeros((0, 3)))


class TestAttentionPool:
    def test_single_instance(self):
        params = pooling.make_attention_params(seed=0, d_att=5, feature_dim=3)
        z = np.array([[0.1, 0.2, 0.3]])
        weights, F = pooling.attention_pool(z, params)
        np.testing.assert_allclose(weights, [1.0])
        np.testing.assert_allclose(F, z[0])

    def test_zero_V_equals_mean_pool(self):
        rng = np.random.default_rng(5)
        Z = rng.normal(size=(6, 4))
        params = pooling.AttentionParams(V=np.zeros((3, 4)), w=rng.normal(size=3))
        weights, F = pooling.attention_pool(Z, params)
        np.testing.assert_allclose(weights, 1.0 / 6.0, atol=1e-12)
        np.testing.assert_allclose(F, pooling.mean_pool(Z), atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        Z = rng.normal(size=(7, 4))
        params = pooling.make_attention_params(seed=1, d_att=8, feature_dim=4)
        perm = rng.permutation(7)
        w_a, F_a = pooling.attention_pool(Z, params)
        w_b, F_b = pooling.attention_pool(Z[perm], params)
        np.testing.assert_allclose(w_a[perm], w_b, atol=1e-12)
        np.testing.assert_allclose(F_a, F_b, atol=1e-12)

    def test_weights_form_simplex(self):
        rng = np.random.default_rng(7)
        Z = rng.normal(size=(9, 4))
        params = pooling.make_attention_params(seed=2, d_att=6, feature_dim=4)
        weights, _ = pooling.attention_pool(Z, params)
        assert np.all(weights > 0.0)
        assert abs(weights.sum() - 1.0) < 1e-12


class TestDiversityLoss:
    def test_orthonormal_rows_zero(self):
        assert pooling.diversity_loss(np.eye(4)) == pytest.approx(0.0, abs=1e-15)

    def test_identical_rows_one(self):
        P = np.tile(numerics.l2_normalize_rows(np.array([[1.0, 2.0, 2.0]])), (3, 1))
        assert pooling.diversity_loss(P) == pytest.approx(1.0)

    def test_sixty_degrees(self):
        P = np.array([[1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0]])
        assert pooling.diversity_loss(P) == pytest.approx(0.5)

    def test_too_few_rows(self):
        with pytest.raises(ContractViolationError):
            pooling.diversity_loss(np.array([[1.0, 0.0]]))

    def test_weight_variant_bounds(self):
        rng = np.random.default_rng(8)
        W = numerics.softmax_columns(rng.normal(size=(6, 4)))
        val = pooling.weight_diversity_loss(W)
        assert 0.0 < val <= 1.0
        assert pooling.weight_diversity_loss(np.eye(4)) == pytest.approx(0.0, abs=1e-15)
