"""RBF-kernel C-SVM trained by sequential minimal optimization.

The solver follows the LIBSVM formulation: minimize
``1/2 a^T Q a - e^T a`` subject to ``0 <= a <= C`` and ``y^T a = 0`` with
``Q = (y y^T) * K``, picking working pairs by the second-order rule and
stopping once the maximal KKT violation drops below ``tol``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

TAU = 1e-12


def sq_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between rows of A and B."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * sq_distances(A, B))


@njit(cache=True, nogil=True)
def _smo(K, y, C, tol, max_iter, record):
    n = y.shape[0]
    alpha = np.zeros(n)
    G = -np.ones(n)
    trace = np.empty(max_iter + 1 if record else 1)
    n_trace = 0
    it = 0
    converged = False
    while it < max_iter:
        if record:
            obj = 0.0
            for t in range(n):
                obj += alpha[t] * (G[t] - 1.0)
            trace[n_trace] = 0.5 * obj
            n_trace += 1

        # i: maximal violator in I_up
        gmax = -np.inf
        i = -1
        for t in range(n):
            if y[t] > 0:
                if alpha[t] < C and -G[t] >= gmax:
                    gmax = -G[t]
                    i = t
            else:
                if alpha[t] > 0 and G[t] >= gmax:
                    gmax = G[t]
                    i = t
        # j: second-order choice in I_low
        gmax2 = -np.inf
        j = -1
        best = np.inf
        for t in range(n):
            if y[t] > 0:
                if alpha[t] > 0:
                    grad_diff = gmax + G[t]
                    if G[t] >= gmax2:
                        gmax2 = G[t]
                else:
                    continue
            else:
                if alpha[t] < C:
                    grad_diff = gmax - G[t]
                    if -G[t] >= gmax2:
                        gmax2 = -G[t]
                else:
                    continue
            if grad_diff > 0 and i >= 0:
                quad = K[i, i] + K[t, t] - 2.0 * K[i, t]
                if quad <= 0:
                    quad = TAU
                obj_diff = -(grad_diff * grad_diff) / quad
                if obj_diff <= best:
                    best = obj_diff
                    j = t
        if gmax + gmax2 < tol or j == -1 or i == -1:
            converged = True
            break

        it += 1
        old_ai = alpha[i]
        old_aj = alpha[j]
        quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if quad <= 0:
            quad = TAU
        if y[i] != y[j]:
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            delta = (G[i] - G[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = total

        dai = (alpha[i] - old_ai) * y[i]
        daj = (alpha[j] - old_aj) * y[j]
        for t in range(n):
            G[t] += y[t] * (K[i, t] * dai + K[j, t] * daj)

    # bias from free vectors, or the midpoint of the feasible interval
    ub = np.inf
    lb = -np.inf
    free = 0
    sum_free = 0.0
    for t in range(n):
        yg = y[t] * G[t]
        if alpha[t] >= C:
            if y[t] < 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        elif alpha[t] <= 0:
            if y[t] > 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        else:
            free += 1
            sum_free += yg
    rho = sum_free / free if free > 0 else (ub + lb) / 2.0
    if record:
        obj = 0.0
        for t in range(n):
            obj += alpha[t] * (G[t] - 1.0)
        trace[n_trace] = 0.5 * obj
        n_trace += 1
    return alpha, G, rho, it, converged, trace[:n_trace]


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i for the support vectors
    alpha: np.ndarray      # full alpha vector over the training rows
    bias: float
    C: float
    gamma: float
    n_iter: int
    converged: bool
    kkt_gap: float
    features: tuple[int, ...] | None = None
    objective_trace: np.ndarray | None = None

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.features is not None:
            X = X[:, list(self.features)]
        if self.support_vectors.shape[0] == 0:
            return np.full(X.shape[0], self.bias)
        return rbf_kernel(X, self.support_vectors, self.gamma) @ self.dual_coef + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.where(self.decision_function(X) > 0, 1, -1)


def kkt_gap(alpha: np.ndarray, G: np.ndarray, y: np.ndarray, C: float) -> float:
    """Maximal violating-pair gap ``m(a) - M(a)``; zero at the optimum."""
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
    if not up.any() or not low.any():
        return 0.0
    v = -y * G
    return float(max(v[up].max() - v[low].min(), 0.0))


def solve_dual(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3,
               max_iter: int | None = None, record_objective: bool = False):
    """Run SMO on a precomputed kernel; returns ``(alpha, G, rho, n_iter, converged, trace)``."""
    y = np.asarray(y, dtype=float)
    n = y.size
    if max_iter is None:
        max_iter = max(1_000_000, 100 * n)
    K = np.ascontiguousarray(K, dtype=float)
    return _smo(K, y, float(C), float(tol), int(max_iter), bool(record_objective))


def _check_labels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    values = set(np.unique(y).tolist())
    if not values <= {-1, 1}:
        raise ValueError("labels must be +1/-1")
    if len(values) < 2:
        raise ValueError("single-class training data")
    return y.astype(float)


def svm_train(X: np.ndarray, y: np.ndarray, C: float, gamma: float, tol: float = 1e-3,
              max_iter: int | None = None, record_objective: bool = False,
              kernel: np.ndarray | None = None) -> SvmModel:
    """Train an RBF C-SVM.  ``X`` is expected to be standardized already."""
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite features")
    if C <= 0 or gamma <= 0:
        raise ValueError("C and gamma must be positive")
    yf = _check_labels(y)
    K = rbf_kernel(X, X, gamma) if kernel is None else kernel
    alpha, G, rho, n_iter, converged, trace = solve_dual(K, yf, C, tol, max_iter, record_objective)
    if not converged:
        logger.warning("SMO hit max_iter=%s (C=%g, gamma=%g)", max_iter, C, gamma)
    sv = alpha > 0
    return SvmModel(support_vectors=X[sv], dual_coef=alpha[sv] * yf[sv], alpha=alpha,
                    bias=-rho, C=C, gamma=gamma, n_iter=int(n_iter), converged=bool(converged),
                    kkt_gap=kkt_gap(alpha, G, yf, C),
                    objective_trace=trace if record_objective else None)
