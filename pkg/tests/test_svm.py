from __future__ import annotations

import numpy as np
import pytest

from mobility_outcome.svm import kkt_gap, rbf_kernel, solve_dual, sq_distances, svm_train

from oracles import qp_svm_dual


def instance(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(20, 60)), int(rng.integers(2, 6))
    X = rng.normal(size=(n, d))
    y = np.where(X[:, 0] + 0.5 * rng.normal(size=n) > 0, 1, -1)
    y[:2] = (1, -1)
    C = float(10 ** rng.uniform(-1, 2))
    gamma = float(10 ** rng.uniform(-1.5, 0.5))
    return X, y, C, gamma


class TestKernel:
    def test_squared_distances(self):
        A = np.random.default_rng(0).normal(size=(7, 3))
        B = np.random.default_rng(1).normal(size=(5, 3))
        ref = np.array([[np.sum((a - b) ** 2) for b in B] for a in A])
        np.testing.assert_allclose(sq_distances(A, B), ref, atol=1e-12)

    def test_rbf_diagonal_and_range(self):
        X = np.random.default_rng(2).normal(size=(10, 4))
        K = rbf_kernel(X, X, 0.3)
        np.testing.assert_allclose(np.diag(K), 1.0)
        assert np.all((K > 0) & (K <= 1))


class TestAgainstQp:
    @pytest.mark.parametrize("seed", range(10))
    def test_decision_values(self, seed):
        X, y, C, gamma = instance(seed)
        model = svm_train(X, y, C, gamma, tol=1e-6)
        alpha, bias = qp_svm_dual(rbf_kernel(X, X, gamma), y.astype(float), C)
        ref = rbf_kernel(X, X, gamma) @ (alpha * y) + bias
        np.testing.assert_allclose(model.decision_function(X), ref, atol=1e-4)
        assert model.converged and model.kkt_gap <= 1e-3

    def test_dual_constraints(self):
        X, y, C, gamma = instance(42)
        model = svm_train(X, y, C, gamma)
        assert np.all(model.alpha >= 0) and np.all(model.alpha <= C)
        assert abs(model.alpha @ y) < 1e-9


class TestSolver:
    def test_separable_pair(self):
        X = np.array([[-1.0], [1.0]])
        model = svm_train(X, np.array([-1, 1]), C=100.0, gamma=1.0, tol=1e-9)
        np.testing.assert_allclose(model.decision_function(X), [-1, 1], atol=1e-6)
        assert model.predict(np.array([[-3.0], [3.0]])).tolist() == [-1, 1]

    def test_objective_monotone(self):
        X, y, C, gamma = instance(7)
        model = svm_train(X, y, C, gamma, record_objective=True)
        trace = model.objective_trace
        assert trace.size > 1 and np.all(np.diff(trace) <= 1e-12)

    def test_kkt_gap_zero_at_optimum(self):
        X, y, C, gamma = instance(3)
        alpha, G, *_ = solve_dual(rbf_kernel(X, X, gamma), y, C, tol=1e-8)
        assert kkt_gap(alpha, G, y.astype(float), C) <= 1e-8

    def test_translation_invariant(self):
        X, y, C, gamma = instance(5)
        a = svm_train(X, y, C, gamma).decision_function(X)
        b = svm_train(X + 7.5, y, C, gamma).decision_function(X + 7.5)
        np.testing.assert_allclose(a, b, atol=1e-8)

    def test_feature_subset(self):
        X, y, C, gamma = instance(6)
        model = svm_train(X[:, :2], y, C, gamma)
        model.features = (0, 1)
        np.testing.assert_allclose(model.decision_function(X),
                                   svm_train(X[:, :2], y, C, gamma).decision_function(X[:, :2]))


class TestErrors:
    def test_single_class(self):
        with pytest.raises(ValueError, match="single-class"):
            svm_train(np.ones((3, 2)), np.ones(3), 1.0, 1.0)

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            svm_train(np.ones((3, 2)), np.array([0, 1, 1]), 1.0, 1.0)

    def test_non_positive_hyperparameters(self):
        with pytest.raises(ValueError):
            svm_train(np.ones((2, 1)), np.array([1, -1]), 0.0, 1.0)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            svm_train(np.array([[np.inf], [0.0]]), np.array([1, -1]), 1.0, 1.0)
