"""Dataset balancing and correlation alignment between two platforms.

CORAL maps source features onto the target's second-order statistics with
``A = Cs^{-1/2} Ct^{1/2}``, the closed-form minimizer of
``||A^T Cs A - Ct||_F``.  The dual variant maps each platform onto the
covariance of the pooled data instead.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

NEGATIVE_EIG_TOL = 1e-10

MODE_NONE = "none"
MODE_SOURCE_TO_TARGET = "source_to_target"
MODE_TARGET_TO_SOURCE = "target_to_source"
MODE_DUAL = "dual"


class AdaptationError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    """Feature rows with their label, user and platform tags."""

    X: np.ndarray
    y: np.ndarray
    user_ids: np.ndarray
    platforms: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise AdaptationError("feature matrix must be 2-D")
        n = self.X.shape[0]
        self.y = np.asarray(self.y)
        self.user_ids = np.asarray(self.user_ids, dtype=object)
        self.platforms = np.asarray(self.platforms, dtype=object)
        if not (self.y.shape[0] == self.user_ids.shape[0] == self.platforms.shape[0] == n):
            raise AdaptationError("row metadata length mismatch")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def take(self, index: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(self.X[index], self.y[index], self.user_ids[index],
                             self.platforms[index])

    def with_X(self, X: np.ndarray) -> "FeatureMatrix":
        return dataclasses.replace(self, X=X)


def _check_finite(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise AdaptationError("non-finite feature values")
    return X


def covariance(X: np.ndarray) -> np.ndarray:
    """Sample covariance (denominator N-1) of the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise AdaptationError("insufficient rows")
    Z = X - X.mean(axis=0)
    C = Z.T @ Z / (X.shape[0] - 1)
    return (C + C.T) / 2


def _eig_psd(C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, V = np.linalg.eigh((C + C.T) / 2)
    if w.size and w.min() < -NEGATIVE_EIG_TOL * max(1.0, abs(w).max()):
        raise AdaptationError(f"covariance not positive semi-definite (min eigenvalue {w.min():.3g})")
    return np.clip(w, 0.0, None), V


def sqrtm_psd(C: np.ndarray) -> np.ndarray:
    w, V = _eig_psd(C)
    return (V * np.sqrt(w)) @ V.T


def inv_sqrtm_psd(C: np.ndarray) -> np.ndarray:
    w, V = _eig_psd(C)
    if w.size and w.min() <= 0:
        raise AdaptationError("singular covariance; use a positive ridge")
    return (V / np.sqrt(w)) @ V.T


def coral_matrix(C_source: np.ndarray, C_target: np.ndarray) -> np.ndarray:
    return inv_sqrtm_psd(C_source) @ sqrtm_psd(C_target)


@dataclass
class AdaptationModel:
    """Fitted alignment.

    For ``source_to_target`` / ``target_to_source`` only ``A`` applies (to
    the source side).  For ``dual`` each side has its own matrix and both
    are re-centred on the pooled mean.
    """

    mode: str
    ridge: float
    A: dict[str, np.ndarray] = field(default_factory=dict)
    means: dict[str, np.ndarray] = field(default_factory=dict)
    covariances: dict[str, np.ndarray] = field(default_factory=dict)
    target_mean: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return next(iter(self.means.values())).shape[0]

    def transform(self, X: np.ndarray, side: str = "source") -> np.ndarray:
        return coral_transform(self, X, side)


def coral_fit(X_s: np.ndarray, X_t: np.ndarray, ridge: float = 1.0,
              mode: str = MODE_SOURCE_TO_TARGET) -> AdaptationModel:
    """Fit a one-sided alignment of ``X_s`` onto ``X_t``."""
    X_s = _check_finite(X_s)
    X_t = _check_finite(X_t)
    if X_s.shape[1] != X_t.shape[1]:
        raise AdaptationError("source and target dimensions differ")
    eye = np.eye(X_s.shape[1])
    C_s = covariance(X_s) + ridge * eye
    C_t = covariance(X_t) + ridge * eye
    mu_s, mu_t = X_s.mean(axis=0), X_t.mean(axis=0)
    return AdaptationModel(mode=mode, ridge=ridge, A={"source": coral_matrix(C_s, C_t)},
                           means={"source": mu_s, "target": mu_t},
                           covariances={"source": C_s, "target": C_t}, target_mean=mu_t)


def dual_coral_fit(X_a: np.ndarray, X_i: np.ndarray, ridge: float = 1.0) -> AdaptationModel:
    """Fit both sides onto the covariance of their concatenation."""
    X_a = _check_finite(X_a)
    X_i = _check_finite(X_i)
    if X_a.shape[1] != X_i.shape[1]:
        raise AdaptationError("android and ios dimensions differ")
    eye = np.eye(X_a.shape[1])
    pooled = np.vstack([X_a, X_i])
    C_a = covariance(X_a) + ridge * eye
    C_i = covariance(X_i) + ridge * eye
    C_ai = covariance(pooled) + ridge * eye
    mu_ai = pooled.mean(axis=0)
    return AdaptationModel(
        mode=MODE_DUAL, ridge=ridge,
        A={"android": coral_matrix(C_a, C_ai), "ios": coral_matrix(C_i, C_ai)},
        means={"android": X_a.mean(axis=0), "ios": X_i.mean(axis=0), "pooled": mu_ai},
        covariances={"android": C_a, "ios": C_i, "pooled": C_ai},
        target_mean=mu_ai,
    )


def coral_transform(model: AdaptationModel, X: np.ndarray, side: str = "source") -> np.ndarray:
    """Map rows ``x`` to ``(x - mu_side) A_side + mu_target``."""
    X = np.asarray(X, dtype=float)
    if model.mode == MODE_NONE:
        return X.copy()
    if side not in model.A:
        raise AdaptationError(f"model has no transform for side {side!r}")
    if X.ndim != 2 or X.shape[1] != model.A[side].shape[0]:
        raise AdaptationError("dimension mismatch")
    return (X - model.means[side]) @ model.A[side] + model.target_mean


def frobenius_gap(X_a: np.ndarray, X_i: np.ndarray) -> float:
    """``||cov(X_a) - cov(X_i)||_F``."""
    return float(np.linalg.norm(covariance(X_a) - covariance(X_i), "fro"))


# -- balancing ----------------------------------------------------------------------

def balance_upsample(source: FeatureMatrix, minority_factor: int = 4,
                     global_factor: float | None = 1.4, target_size: int | None = None,
                     seed: int = 0) -> FeatureMatrix:
    """Duplicate rows to reduce class and dataset imbalance.

    Minority-class rows are repeated ``minority_factor`` times.  The result
    is then grown by cyclic duplication of a seeded permutation to
    ``round(global_factor * n)`` rows, or to ``target_size`` when given.
    Row order is finally shuffled with the same seed.
    """
    if minority_factor < 1:
        raise AdaptationError("minority_factor must be >= 1")
    labels, counts = np.unique(source.y, return_counts=True)
    if labels.size != 2:
        raise AdaptationError("balancing needs both classes present")
    minority = labels[np.argmin(counts)] if counts[0] != counts[1] else None

    idx = np.arange(len(source))
    if minority is not None and minority_factor > 1:
        extra = np.repeat(idx[source.y == minority], minority_factor - 1)
        idx = np.concatenate([idx, extra])

    rng = np.random.default_rng(seed)
    n = idx.size
    if target_size is not None:
        goal = int(target_size)
    elif global_factor is not None:
        goal = int(round(global_factor * n))
    else:
        goal = n
    if goal > n:
        perm = rng.permutation(idx)
        idx = np.concatenate([idx, np.resize(perm, goal - n)])
    if idx.size == len(source):
        return source.take(np.arange(len(source)))
    idx = idx[rng.permutation(idx.size)]
    return source.take(idx)
