from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobility_outcome.adapt import (AdaptationError, FeatureMatrix, balance_upsample, coral_fit,
                                    coral_matrix, coral_transform, covariance, dual_coral_fit,
                                    frobenius_gap, inv_sqrtm_psd, sqrtm_psd)

from oracles import loop_covariance


def random_spd(rng, d):
    M = rng.normal(size=(d, d))
    return M @ M.T + 0.1 * np.eye(d)


def correlated(rng, n, C, mu=0.0):
    return rng.normal(size=(n, C.shape[0])) @ np.linalg.cholesky(C).T + mu


class TestMatrixRoots:
    def test_diagonal_example(self):
        A = coral_matrix(np.diag([4.0, 1.0]), np.diag([1.0, 4.0]))
        np.testing.assert_allclose(A, np.diag([0.5, 2.0]), atol=1e-12)

    def test_square_root_squares_back(self):
        C = random_spd(np.random.default_rng(0), 6)
        S = sqrtm_psd(C)
        np.testing.assert_allclose(S @ S, C, atol=1e-10)
        np.testing.assert_allclose(inv_sqrtm_psd(C) @ S, np.eye(6), atol=1e-8)

    def test_singular_inverse_rejected(self):
        with pytest.raises(AdaptationError):
            inv_sqrtm_psd(np.diag([1.0, 0.0]))

    def test_negative_definite_rejected(self):
        with pytest.raises(AdaptationError):
            sqrtm_psd(np.diag([1.0, -1.0]))


class TestCovariance:
    def test_against_loop_oracle(self):
        X = np.random.default_rng(1).normal(size=(40, 5))
        np.testing.assert_allclose(covariance(X), loop_covariance(X), atol=1e-12)

    def test_single_row_rejected(self):
        with pytest.raises(AdaptationError):
            covariance(np.ones((1, 3)))


class TestCoral:
    def test_exact_alignment_without_ridge(self):
        rng = np.random.default_rng(2)
        Xs = correlated(rng, 300, random_spd(rng, 5), 3.0)
        Xt = correlated(rng, 400, random_spd(rng, 5), -1.0)
        model = coral_fit(Xs, Xt, ridge=0.0)
        Z = coral_transform(model, Xs)
        np.testing.assert_allclose(covariance(Z), covariance(Xt), atol=1e-8)
        np.testing.assert_allclose(Z.mean(axis=0), Xt.mean(axis=0), atol=1e-10)

    def test_exact_alignment_of_regularized_covariances(self):
        rng = np.random.default_rng(3)
        Xs, Xt = rng.normal(size=(200, 4)) * 3, rng.normal(size=(200, 4))
        model = coral_fit(Xs, Xt, ridge=1.0)
        A = model.A["source"]
        np.testing.assert_allclose(A.T @ model.covariances["source"] @ A,
                                   model.covariances["target"], atol=1e-8)

    def test_identity_for_same_data(self):
        X = np.random.default_rng(4).normal(size=(100, 6))
        model = coral_fit(X, X)
        np.testing.assert_allclose(model.A["source"], np.eye(6), atol=1e-10)
        np.testing.assert_allclose(coral_transform(model, X), X, atol=1e-10)

    def test_reduces_covariance_gap(self):
        rng = np.random.default_rng(5)
        Xs = correlated(rng, 500, random_spd(rng, 4) * 5)
        Xt = correlated(rng, 500, random_spd(rng, 4))
        Z = coral_transform(coral_fit(Xs, Xt, ridge=0.0), Xs)
        assert frobenius_gap(Z, Xt) < 1e-8 < frobenius_gap(Xs, Xt)

    def test_dimension_mismatch(self):
        with pytest.raises(AdaptationError):
            coral_fit(np.ones((5, 2)), np.ones((5, 3)))

    def test_nan_rejected(self):
        X = np.ones((5, 2))
        X[0, 0] = np.nan
        with pytest.raises(AdaptationError):
            coral_fit(X, np.ones((5, 2)))


class TestDualCoral:
    def test_both_sides_match_pooled(self):
        rng = np.random.default_rng(6)
        Xa = correlated(rng, 150, random_spd(rng, 5), 2.0)
        Xi = correlated(rng, 350, random_spd(rng, 5) * 3, -2.0)
        model = dual_coral_fit(Xa, Xi, ridge=0.0)
        pooled = covariance(np.vstack([Xa, Xi]))
        for side, X in (("android", Xa), ("ios", Xi)):
            Z = coral_transform(model, X, side)
            np.testing.assert_allclose(covariance(Z), pooled, atol=1e-8)
            np.testing.assert_allclose(Z.mean(axis=0), np.vstack([Xa, Xi]).mean(axis=0), atol=1e-10)

    def test_unknown_side(self):
        model = dual_coral_fit(np.random.default_rng(0).normal(size=(10, 2)),
                               np.random.default_rng(1).normal(size=(10, 2)))
        with pytest.raises(AdaptationError):
            coral_transform(model, np.zeros((1, 2)), "source")

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.01, 5.0))
    def test_regularized_exactness(self, seed, d, ridge):
        rng = np.random.default_rng(seed)
        Xa, Xi = rng.normal(size=(30, d)) * 4, rng.normal(size=(45, d))
        m = dual_coral_fit(Xa, Xi, ridge=ridge)
        for side in ("android", "ios"):
            A = m.A[side]
            np.testing.assert_allclose(A.T @ m.covariances[side] @ A, m.covariances["pooled"],
                                       rtol=1e-7, atol=1e-7)


def matrix(n_pos, n_neg):
    n = n_pos + n_neg
    y = np.array([1] * n_pos + [-1] * n_neg)
    return FeatureMatrix(np.arange(n, dtype=float)[:, None], y, np.array([f"u{k}" for k in range(n)]),
                         np.full(n, "android"))


class TestBalance:
    def test_reference_counts(self):
        out = balance_upsample(matrix(39, 163))
        assert len(out) == round(1.4 * (156 + 163)) == 447
        # every original row survives
        assert set(out.X[:, 0]) == set(range(202))
        # duplication before the global step: each minority row at least 4 times
        counts = np.bincount(out.X[:, 0].astype(int), minlength=202)
        assert counts[:39].min() >= 4 and counts[39:].min() >= 1

    def test_minority_only_step(self):
        out = balance_upsample(matrix(39, 163), global_factor=None)
        assert (out.y == 1).sum() == 156 and (out.y == -1).sum() == 163

    def test_identity(self):
        src = matrix(10, 20)
        out = balance_upsample(src, minority_factor=1, global_factor=1.0)
        np.testing.assert_array_equal(out.X, src.X)

    def test_target_size(self):
        assert len(balance_upsample(matrix(5, 10), target_size=100)) == 100

    def test_seeded(self):
        a = balance_upsample(matrix(9, 30), seed=3)
        b = balance_upsample(matrix(9, 30), seed=3)
        np.testing.assert_array_equal(a.X, b.X)

    def test_single_class_rejected(self):
        with pytest.raises(AdaptationError):
            balance_upsample(matrix(0, 5))

    def test_bad_factor(self):
        with pytest.raises(AdaptationError):
            balance_upsample(matrix(2, 5), minority_factor=0)

    def test_metadata_length_checked(self):
        with pytest.raises(AdaptationError):
            FeatureMatrix(np.ones((3, 2)), np.ones(2), np.array(["a"] * 3), np.array(["ios"] * 3))
