import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfwsvd.compress import (
    CholeskyPair,
    LayerPlan,
    bert_base_inventory,
    compress,
    exact_quadratic_increase,
    fwsvd_compress,
    gfwsvd_compress,
    plan_ranks,
    svd_compress,
    weighted_error,
)
from gfwsvd.errors import DefinitenessError, InfeasibleTargetError, ValidationError
from gfwsvd.fisher import DiagonalFisherWeights, GradientAccumulator, extract_kronecker_factors
from gfwsvd.linalg import kron, vec

from conftest import random_spd, rel


def random_problem(rng, n, m, cond=50.0):
    return rng.standard_normal((n, m)), random_spd(rng, m, cond), random_spd(rng, n, cond)


def aux_tail_energy(W, A, B, r):
    pair = CholeskyPair.from_matrices(A, B)
    s = np.linalg.svd(pair.L_B.T @ W @ pair.L_A, compute_uv=False)
    return float(np.sum(s[r:] ** 2))


class TestGfwsvd:
    def test_identity_factors_truncate(self):
        layer = gfwsvd_compress(np.diag([3.0, 1.0]), (np.eye(2), np.eye(2)), 1)
        np.testing.assert_allclose(layer.reconstruct(), np.diag([3.0, 0.0]), atol=1e-14)

    def test_reweighting_changes_kept_direction(self):
        W = np.diag([1.0, 2.0])
        layer = gfwsvd_compress(W, (np.eye(2), np.diag([100.0, 1.0])), 1)
        np.testing.assert_allclose(layer.singular_values, [10.0])
        np.testing.assert_allclose(layer.reconstruct(), np.diag([1.0, 0.0]), atol=1e-14)
        np.testing.assert_allclose(svd_compress(W, 1).reconstruct(), np.diag([0.0, 2.0]), atol=1e-14)

    def test_full_rank_identity(self, rng):
        for n, m in [(4, 6), (6, 4), (5, 5)]:
            W, A, B = random_problem(rng, n, m)
            assert rel(gfwsvd_compress(W, (A, B), min(n, m)).reconstruct(), W) <= 1e-9

    def test_layer_shapes(self, rng):
        W, A, B = random_problem(rng, 5, 7)
        layer = gfwsvd_compress(W, (A, B), 3)
        assert layer.W1.shape == (3, 7) and layer.W2.shape == (5, 3)
        assert layer.shape == (5, 7) and layer.num_params == 3 * 12

    def test_formula_against_explicit_inverses(self, rng):
        W, A, B = random_problem(rng, 4, 5)
        pair = CholeskyPair.from_matrices(A, B)
        U, s, Vt = np.linalg.svd(pair.L_B.T @ W @ pair.L_A)
        r = 2
        W1 = np.sqrt(s[:r])[:, None] * Vt[:r] @ np.linalg.inv(pair.L_A)
        W2 = np.linalg.inv(pair.L_B).T @ U[:, :r] * np.sqrt(s[:r])
        layer = gfwsvd_compress(W, pair, r)
        assert rel(layer.reconstruct(), W2 @ W1) <= 1e-10

    def test_accepts_kronecker_factors(self, rng):
        acc = GradientAccumulator(3, 4, rng.standard_normal((8, 3, 4)))
        f = extract_kronecker_factors(acc)
        W = rng.standard_normal((3, 4))
        a = gfwsvd_compress(W, f, 2)
        b = gfwsvd_compress(W, (f.A, f.B), 2)
        np.testing.assert_array_equal(a.reconstruct(), b.reconstruct())

    def test_singular_factor_raises(self, rng):
        with pytest.raises(DefinitenessError):
            gfwsvd_compress(rng.standard_normal((2, 2)), (np.ones((2, 2)), np.eye(2)), 1)

    @pytest.mark.parametrize("r", [0, 4, 1.5, True])
    def test_rank_out_of_range(self, r):
        with pytest.raises(ValidationError):
            gfwsvd_compress(np.ones((3, 3)), (np.eye(3), np.eye(3)), r)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            gfwsvd_compress(np.ones((3, 2)), (np.eye(3), np.eye(3)), 1)


class TestFwsvd:
    def test_unit_weights_equal_svd(self, rng):
        W = rng.standard_normal((5, 4))
        for r in range(1, 5):
            a = fwsvd_compress(W, np.ones(5), r).reconstruct()
            np.testing.assert_allclose(a, svd_compress(W, r).reconstruct(), atol=1e-12)

    def test_hand_example(self):
        layer = fwsvd_compress(np.diag([1.0, 2.0]), np.array([10.0, 1.0]), 1)
        np.testing.assert_allclose(layer.reconstruct(), np.diag([1.0, 0.0]), atol=1e-14)

    def test_full_rank(self, rng):
        W = rng.standard_normal((4, 6))
        assert rel(fwsvd_compress(W, rng.uniform(0.1, 3, 4), 4).reconstruct(), W) <= 1e-9

    def test_zero_row_weight_floored(self, rng):
        W = rng.standard_normal((3, 3))
        layer = fwsvd_compress(W, np.array([1.0, 0.0, 2.0]), 3)
        rec = layer.reconstruct()
        # the floored row is only decodable, not accurate
        assert np.all(np.isfinite(rec))
        assert rel(rec[[0, 2]], W[[0, 2]]) <= 1e-9

    def test_accepts_weights_object(self, rng):
        W = rng.standard_normal((3, 2))
        D = np.array([1.0, 2.0, 3.0])
        w = DiagonalFisherWeights(D, np.ones((3, 2)))
        np.testing.assert_array_equal(fwsvd_compress(W, w, 1).W1, fwsvd_compress(W, D, 1).W1)

    def test_bad_weights(self):
        with pytest.raises(ValidationError):
            fwsvd_compress(np.eye(2), np.array([1.0, -1.0]), 1)
        with pytest.raises(ValidationError):
            fwsvd_compress(np.eye(2), np.array([1.0, 1.0, 1.0]), 1)


class TestSvd:
    def test_diagonal(self):
        np.testing.assert_allclose(svd_compress(np.diag([3.0, 1.0]), 1).reconstruct(), np.diag([3.0, 0.0]))

    def test_zero_matrix(self):
        layer = svd_compress(np.zeros((3, 2)), 1)
        np.testing.assert_array_equal(layer.W1, 0.0)
        np.testing.assert_array_equal(layer.W2, 0.0)

    def test_full_rank(self, rng):
        W = rng.standard_normal((6, 3))
        assert rel(svd_compress(W, 3).reconstruct(), W) <= 1e-9

    def test_dispatch(self, rng):
        W = rng.standard_normal((3, 3))
        assert compress("svd", W, 2).method == "svd"
        with pytest.raises(ValidationError):
            compress("pca", W, 2)
        with pytest.raises(ValidationError):
            compress("gfwsvd", W, 2)
        with pytest.raises(ValidationError):
            compress("fwsvd", W, 2)


class TestMetrics:
    def test_exact_reconstruction_zero(self, rng):
        W, A, B = random_problem(rng, 3, 4)
        assert weighted_error(W, gfwsvd_compress(W, (A, B), 3), (A, B)) <= 1e-20

    def test_identity_factors_give_frobenius(self, rng):
        W = rng.standard_normal((4, 5))
        layer = svd_compress(W, 2)
        expected = np.linalg.norm(W - layer.reconstruct()) ** 2
        np.testing.assert_allclose(weighted_error(W, layer, CholeskyPair.identity(4, 5)), expected, rtol=1e-12)

    def test_quadratic_form_identity(self, rng):
        for _ in range(20):
            n, m = rng.integers(1, 7, size=2)
            W, A, B = random_problem(rng, n, m)
            layer = svd_compress(W, 1)
            delta = vec(W - layer.reconstruct())
            explicit = delta @ kron(A, B) @ delta
            np.testing.assert_allclose(weighted_error(W, layer, (A, B)), explicit, rtol=1e-9)
            np.testing.assert_allclose(exact_quadratic_increase(W, layer, kron(A, B)), explicit, rtol=1e-12)

    def test_exact_increase_cases(self, rng):
        W = rng.standard_normal((3, 2))
        full = svd_compress(W, 2)
        assert exact_quadratic_increase(W, full, np.eye(6)) <= 1e-28
        layer = svd_compress(W, 1)
        np.testing.assert_allclose(
            exact_quadratic_increase(W, layer, np.eye(6)), np.linalg.norm(W - layer.reconstruct()) ** 2
        )
        with pytest.raises(ValidationError):
            exact_quadratic_increase(W, layer, np.eye(5))


class TestOptimalityInvariants:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_gfwsvd_minimizes_weighted_error(self, n, m, seed):
        r_ = np.random.default_rng(seed)
        W, A, B = random_problem(r_, n, m)
        pair = CholeskyPair.from_matrices(A, B)
        D = r_.uniform(0.1, 2.0, n)
        for r in range(1, min(n, m) + 1):
            best = weighted_error(W, gfwsvd_compress(W, pair, r), pair)
            assert best <= weighted_error(W, svd_compress(W, r), pair) + 1e-10
            assert best <= weighted_error(W, fwsvd_compress(W, D, r), pair) + 1e-10
            for _ in range(5):
                X = r_.standard_normal((n, r)) @ r_.standard_normal((r, m))
                E = pair.L_B.T @ (W - X) @ pair.L_A
                assert best <= np.sum(E * E) + 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_error_equals_discarded_energy(self, n, m, seed):
        r_ = np.random.default_rng(seed)
        W, A, B = random_problem(r_, n, m)
        for r in range(1, min(n, m) + 1):
            err = weighted_error(W, gfwsvd_compress(W, (A, B), r), (A, B))
            tail = aux_tail_energy(W, A, B, r)
            assert abs(err - tail) <= 1e-9 * max(tail, 1e-12) + 1e-20

    def test_collapse_to_svd(self, rng):
        for c1, c2 in [(1.0, 1.0), (0.01, 7.0), (300.0, 0.2)]:
            W = rng.standard_normal((5, 4))
            for r in range(1, 5):
                g = gfwsvd_compress(W, (c1 * np.eye(4), c2 * np.eye(5)), r).reconstruct()
                assert rel(g, svd_compress(W, r).reconstruct()) <= 1e-9

    def test_collapse_to_fwsvd(self, rng):
        W = rng.standard_normal((6, 4))
        D = rng.uniform(0.2, 3.0, 6)
        for r in range(1, 5):
            g = gfwsvd_compress(W, (np.eye(4), np.diag(D**2)), r).reconstruct()
            assert rel(g, fwsvd_compress(W, D, r).reconstruct()) <= 1e-8

    def test_scale_invariance(self, rng):
        W, A, B = random_problem(rng, 5, 6)
        ref = gfwsvd_compress(W, (A, B), 2).reconstruct()
        for c in (1e-3, 1.0, 1e3):
            assert rel(gfwsvd_compress(W, (c * A, B / c), 2).reconstruct(), ref) <= 1e-8

    def test_monotone_in_rank(self, rng):
        W, A, B = random_problem(rng, 6, 7)
        pair = CholeskyPair.from_matrices(A, B)
        D = rng.uniform(0.5, 2.0, 6)
        for method in ("gfwsvd", "fwsvd", "svd"):
            errs = [weighted_error(W, compress(method, W, r, factors=pair, weights=D), pair) for r in range(1, 7)]
            if method == "gfwsvd":
                assert np.all(np.diff(errs) <= 1e-12)
            # the baselines are monotone in their own norms
        own = [np.linalg.norm(W - svd_compress(W, r).reconstruct()) for r in range(1, 7)]
        assert np.all(np.diff(own) <= 1e-12)


class TestPlanner:
    def test_small_layer(self):
        plan = plan_ranks([("a", 4, 6)], rank=2)
        assert plan.params == 20 and plan.dense_params == 24
        np.testing.assert_allclose(plan.retention, 20 / 24)

    def test_bert_ffn_layer(self):
        plan = plan_ranks([("ffn", 768, 3072)], rank=384)
        np.testing.assert_allclose(plan.retention, 0.625)

    def test_full_retention(self):
        plan = plan_ranks([("a", 4, 6), ("b", 8, 3)], retention=1.0)
        assert [l.rank for l in plan.layers] == [4, 3]
        assert plan.removal == 0.0

    def test_fraction_mode_largest_rank(self):
        plan = plan_ranks([("a", 100, 100)], retention=0.5)
        assert plan.layers[0].rank == 25
        assert plan.retention <= 0.5

    def test_infeasible(self):
        with pytest.raises(InfeasibleTargetError):
            plan_ranks([("a", 100, 100)], retention=0.01)

    def test_argument_checks(self):
        with pytest.raises(ValidationError):
            plan_ranks([("a", 4, 4)])
        with pytest.raises(ValidationError):
            plan_ranks([("a", 4, 4)], rank=1, retention=0.5)
        with pytest.raises(ValidationError):
            plan_ranks([("a", 4, 4)], retention=1.5)
        with pytest.raises(ValidationError):
            plan_ranks([("a", 4, 4)], rank=0)

    def test_dense_kept_when_factors_larger(self):
        layer = LayerPlan("a", 4, 6, 3)
        assert not layer.factorized and layer.retention == 1.0

    def test_ranks_clipped(self):
        plan = plan_ranks([("a", 3, 5)], rank=10)
        assert plan.layers[0].rank == 3

    def test_retention_monotone(self):
        layers, frozen = bert_base_inventory()
        ret = [plan_ranks(layers, rank=r, frozen_params=frozen).model_retention for r in range(1, 800, 7)]
        assert np.all(np.diff(ret) >= 0)
        assert max(ret) <= 1.0

    def test_bert_inventory_totals(self):
        layers, frozen = bert_base_inventory()
        assert len(layers) == 24
        dense = sum(n * m for _, n, m in layers)
        assert dense == 24 * 768 * 3072
        assert 105e6 < dense + frozen < 140e6

    def test_summary(self):
        s = plan_ranks([("a", 4, 6)], rank=2, frozen_params=6).summary()
        assert s["layers"][0]["factorized"]
        np.testing.assert_allclose(s["model_retention"], 26 / 30)
