"""Leave-one-user-out evaluation over feature scenarios and adaptation modes.

For every held-out user the remaining users form the training partition,
which is balanced, aligned across platforms, and standardized before an
RBF SVM is fit.  Predictions from all folds are pooled; the number of
top-ranked features and ``(C, gamma)`` are chosen to maximize pooled F1.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .adapt import (MODE_TARGET_TO_SOURCE, AdaptationError, FeatureMatrix, balance_upsample,
                    coral_fit, coral_transform, dual_coral_fit)
from .diagnostics import ExclusionLog
from .features import FEATURE_NAMES, FeatureTable
from .rfe import svm_rfe_rank
from .svm import solve_dual

logger = logging.getLogger(__name__)


class Scenario(str, enum.Enum):
    QIDS_PLUS_BASELINE = "qids_plus_baseline"
    LOCATION = "location"
    LOCATION_PLUS_LOCATION_BASELINE = "location_plus_location_baseline"
    LOCATION_PLUS_QIDS_BASELINE = "location_plus_qids_baseline"
    LOCATION_PLUS_BOTH_BASELINES = "location_plus_both_baselines"
    ALL = "all"


class Mode(str, enum.Enum):
    NONE = "none"
    ANDROID_TRANSFORMED = "android_transformed"
    IOS_TRANSFORMED = "ios_transformed"
    DUAL_TRANSFORMED = "dual_transformed"


MODE_ALIASES = {"dual": Mode.DUAL_TRANSFORMED, "android": Mode.ANDROID_TRANSFORMED,
                "ios": Mode.IOS_TRANSFORMED}

BASELINE_NAMES = tuple(f"baseline_{n}" for n in FEATURE_NAMES)


def parse_mode(value: str | Mode) -> Mode:
    if isinstance(value, Mode):
        return value
    value = value.strip().lower()
    return MODE_ALIASES.get(value) or Mode(value)


def scenario_columns(scenario: Scenario) -> list[str]:
    scenario = Scenario(scenario)
    loc = list(FEATURE_NAMES)
    base = list(BASELINE_NAMES)
    return {
        Scenario.QIDS_PLUS_BASELINE: ["qids", "qids_baseline"],
        Scenario.LOCATION: loc,
        Scenario.LOCATION_PLUS_LOCATION_BASELINE: loc + base,
        Scenario.LOCATION_PLUS_QIDS_BASELINE: loc + ["qids_baseline"],
        Scenario.LOCATION_PLUS_BOTH_BASELINES: loc + ["qids_baseline"] + base,
        Scenario.ALL: ["qids", "qids_baseline"] + loc + base,
    }[scenario]


def scenario_matrix(table: FeatureTable, scenario: Scenario,
                    log: ExclusionLog | None = None) -> tuple[FeatureMatrix, list[str], np.ndarray]:
    """Build the scenario's matrix; columns derived from location data are flagged for alignment.

    Users lacking first-week data are dropped from scenarios that need a
    location baseline.
    """
    names = scenario_columns(scenario)
    source = {"qids": table.qids[:, None], "qids_baseline": table.qids_baseline[:, None]}
    for k, n in enumerate(FEATURE_NAMES):
        source[n] = table.location[:, k:k + 1]
    for k, n in enumerate(BASELINE_NAMES):
        source[n] = table.baseline[:, k:k + 1]
    X = np.hstack([source[n] for n in names])
    ok = np.all(np.isfinite(X), axis=1)
    if log is not None:
        for u in sorted(set(table.user_ids[~ok].tolist()) - set(table.user_ids[ok].tolist())):
            log.add(f"scenario:{Scenario(scenario).value}", "user", u, "missing_location_baseline")
    fm = FeatureMatrix(X[ok], table.labels[ok], table.user_ids[ok], table.platforms[ok])
    adapt_mask = np.array([n not in ("qids", "qids_baseline") for n in names])
    return fm, names, adapt_mask


# -- metrics --------------------------------------------------------------------------

@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    per_user: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int, per_user=None) -> "Metrics":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(precision, recall, f1, int(tp), int(fp), int(tn), int(fn), per_user or {})

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def f1_metrics(predictions: Sequence, labels: Sequence, user_ids: Sequence | None = None) -> Metrics:
    """Confusion counts and P/R/F1 with "improved" (truthy / +1) as the positive class."""
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels differ in length")
    if pred.size == 0:
        raise ValueError("empty input")
    p = pred > 0
    t = lab > 0
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    tn = int(np.sum(~p & ~t))
    fn = int(np.sum(~p & t))
    per_user = {}
    if user_ids is not None:
        uids = np.asarray(user_ids, dtype=object)
        for u in sorted(set(uids.tolist())):
            m = uids == u
            per_user[u] = (int(np.sum(p[m] & t[m])), int(np.sum(p[m] & ~t[m])),
                           int(np.sum(~p[m] & ~t[m])), int(np.sum(~p[m] & t[m])))
    return Metrics.from_counts(tp, fp, tn, fn, per_user)


def _pooled_f1(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Vectorized pooled F1 along the last axis (pred, truth boolean)."""
    tp = np.sum(pred & truth, axis=-1)
    fp = np.sum(pred & ~truth, axis=-1)
    fn = np.sum(~pred & truth, axis=-1)
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros(tp.shape, dtype=float), where=denom > 0)


# -- configuration --------------------------------------------------------------------

FULL_EXPONENTS = tuple(range(-15, 16))


@dataclass(frozen=True)
class EvalConfig:
    c_exponents: tuple[int, ...] = FULL_EXPONENTS
    gamma_exponents: tuple[int, ...] = FULL_EXPONENTS
    rfe_c_exponents: tuple[int, ...] | None = None      # None: same as c_exponents
    rfe_gamma_exponents: tuple[int, ...] | None = None
    min_features: int = 2
    tol: float = 1e-3
    ridge: float = 1.0
    align_scale: str = "pooled"       # pooled | raw
    balance_mode: str = "auto"        # auto | fixed | off
    minority_factor: int = 4
    global_factor: float = 1.4
    balance_scope: str = "fold"       # fold | global
    f1_averaging: str = "pooled"      # pooled | per_fold
    nested_cv: bool = False

    @property
    def grid(self) -> list[tuple[float, float]]:
        return [(2.0 ** c, 2.0 ** g) for c in self.c_exponents for g in self.gamma_exponents]

    @property
    def rfe_grid(self) -> list[tuple[float, float]]:
        cs = self.rfe_c_exponents if self.rfe_c_exponents is not None else self.c_exponents
        gs = self.rfe_gamma_exponents if self.rfe_gamma_exponents is not None else self.gamma_exponents
        return [(2.0 ** c, 2.0 ** g) for c in cs for g in gs]


# -- fold preparation -----------------------------------------------------------------

def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def balance_platforms(fm: FeatureMatrix, cfg: EvalConfig, seed: int) -> FeatureMatrix:
    """Upsample the platform with fewer rows (class balance first, then size)."""
    if cfg.balance_mode == "off":
        return fm
    plats, counts = np.unique(fm.platforms.astype(str), return_counts=True)
    if plats.size < 2:
        return fm
    small = plats[np.argmin(counts)]
    large_n = int(counts.max())
    in_small = fm.platforms.astype(str) == small
    part = fm.take(np.flatnonzero(in_small))
    rest = fm.take(np.flatnonzero(~in_small))
    classes, ccounts = np.unique(part.y, return_counts=True)
    if classes.size < 2:
        logger.debug("balance skipped: %s partition has a single class", small)
        return fm
    if cfg.balance_mode == "fixed":
        up = balance_upsample(part, cfg.minority_factor, cfg.global_factor, seed=seed)
    elif cfg.balance_mode == "auto":
        factor = max(1, int(round(ccounts.max() / ccounts.min())))
        grown = len(part) + (factor - 1) * int(ccounts.min())
        up = balance_upsample(part, factor, None, target_size=max(grown, large_n), seed=seed)
    else:
        raise ValueError(f"unknown balance_mode {cfg.balance_mode!r}")
    return FeatureMatrix(np.vstack([up.X, rest.X]), np.concatenate([up.y, rest.y]),
                         np.concatenate([up.user_ids, rest.user_ids]),
                         np.concatenate([up.platforms, rest.platforms]))


def fit_alignment(train: FeatureMatrix, mode: Mode, mask: np.ndarray, ridge: float,
                  scale: str = "pooled") -> Callable[[FeatureMatrix], np.ndarray]:
    """Fit the cross-platform alignment on ``train``; returns a row mapper.

    With ``scale="pooled"`` the masked columns are divided by their pooled
    training standard deviation before fitting (and multiplied back after
    mapping), so the ridge acts on every column alike regardless of units.
    ``scale="raw"`` fits on the columns as given.
    """
    mode = parse_mode(mode)
    if mode is Mode.NONE or not mask.any():
        return lambda fm: fm.X.copy()
    if scale not in ("pooled", "raw"):
        raise ValueError(f"unknown alignment scale {scale!r}")
    plat = train.platforms.astype(str)
    sd = train.X[:, mask].std(axis=0) if scale == "pooled" else np.ones(int(mask.sum()))
    sd[sd == 0] = 1.0
    Xa = train.X[plat == "android"][:, mask] / sd
    Xi = train.X[plat == "ios"][:, mask] / sd
    if len(Xa) < 2 or len(Xi) < 2:
        logger.debug("alignment skipped: a platform has fewer than 2 training rows")
        return lambda fm: fm.X.copy()
    if mode is Mode.DUAL_TRANSFORMED:
        model = dual_coral_fit(Xa, Xi, ridge)
        sides = {"android": "android", "ios": "ios"}
    elif mode is Mode.ANDROID_TRANSFORMED:
        model = coral_fit(Xa, Xi, ridge)
        sides = {"android": "source"}
    else:
        model = coral_fit(Xi, Xa, ridge, mode=MODE_TARGET_TO_SOURCE)
        sides = {"ios": "source"}

    def apply(fm: FeatureMatrix) -> np.ndarray:
        X = fm.X.copy()
        p = fm.platforms.astype(str)
        for platform, side in sides.items():
            rows = p == platform
            if rows.any():
                X[np.ix_(rows, mask)] = coral_transform(model, fm.X[rows][:, mask] / sd, side) * sd
        return X

    return apply


def standardize(train: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return [(a - mu) / sd for a in (train,) + others]


@dataclass
class PreparedFold:
    test_user: str
    X_train: np.ndarray
    y_train: np.ndarray
    train_users: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    test_rows: np.ndarray


def prepare_fold(fm: FeatureMatrix, test_user: str, mode: Mode, mask: np.ndarray,
                 cfg: EvalConfig, seed: int, balanced: FeatureMatrix | None = None) -> PreparedFold:
    """Split off one user, then balance, align and standardize using training rows only.

    ``balanced`` supplies a pre-balanced copy of the whole cohort for
    ``balance_scope = "global"``; the test user's duplicates are removed
    from it along with the originals.
    """
    test_rows = np.flatnonzero(fm.user_ids == test_user)
    if balanced is None:
        train = fm.take(np.flatnonzero(fm.user_ids != test_user))
        train = balance_platforms(train, cfg, seed)
    else:
        train = balanced.take(np.flatnonzero(balanced.user_ids != test_user))
    test = fm.take(test_rows)
    align = fit_alignment(train, mode, mask, cfg.ridge, cfg.align_scale)
    Xtr, Xte = standardize(align(train), align(test))
    return PreparedFold(test_user, Xtr, np.where(train.y > 0, 1.0, -1.0), train.user_ids,
                        Xte, np.where(test.y > 0, 1.0, -1.0), test_rows)


def prepare_full(fm: FeatureMatrix, mode: Mode, mask: np.ndarray, cfg: EvalConfig,
                 seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Whole cohort balanced, aligned and standardized (used for feature ranking)."""
    data = balance_platforms(fm, cfg, seed)
    X = standardize(fit_alignment(data, mode, mask, cfg.ridge, cfg.align_scale)(data))[0]
    return X, np.where(data.y > 0, 1, -1)


# -- grid engine ----------------------------------------------------------------------

@dataclass
class GridOutcome:
    """Pooled predictions for every (m, C, gamma) candidate."""

    m_values: list[int]
    predictions: np.ndarray        # (n_m, n_C, n_gamma, n_rows) bool; rows of skipped folds unused
    evaluated_rows: np.ndarray     # bool mask of rows predicted
    fold_of_row: np.ndarray
    skipped: list[str]
    folds: list[str]
    leakage_violations: int


def run_grid(fm: FeatureMatrix, order: Sequence[int], mode: Mode, mask: np.ndarray,
             cfg: EvalConfig, seed: int, users: Sequence[str] | None = None,
             m_values: Sequence[int] | None = None) -> GridOutcome:
    users = sorted(set(fm.user_ids.tolist())) if users is None else list(users)
    n_feat = len(order)
    if m_values is None:
        m_values = list(range(min(cfg.min_features, n_feat), n_feat + 1))
    Cs = [2.0 ** c for c in cfg.c_exponents]
    gammas = [2.0 ** g for g in cfg.gamma_exponents]
    preds = np.zeros((len(m_values), len(Cs), len(gammas), len(fm)), dtype=bool)
    evaluated = np.zeros(len(fm), dtype=bool)
    fold_of_row = np.full(len(fm), -1)
    skipped: list[str] = []
    violations = 0

    balanced = None
    if cfg.balance_scope == "global":
        balanced = balance_platforms(fm, cfg, _derive_seed(seed, 0))

    for f_idx, user in enumerate(users):
        fold = prepare_fold(fm, user, mode, mask, cfg, _derive_seed(seed, 1, f_idx), balanced)
        violations += int(np.sum(fold.train_users == user))
        if np.unique(fold.y_train).size < 2:
            logger.info("fold %s skipped: single-class training partition", user)
            skipped.append(user)
            continue
        evaluated[fold.test_rows] = True
        fold_of_row[fold.test_rows] = f_idx
        Xtr = fold.X_train[:, list(order)]
        Xte = fold.X_test[:, list(order)]
        D_tr = np.zeros((Xtr.shape[0], Xtr.shape[0]))
        D_te = np.zeros((Xte.shape[0], Xtr.shape[0]))
        added = 0
        for mi, m in enumerate(m_values):
            for k in range(added, m):
                D_tr += (Xtr[:, k][:, None] - Xtr[:, k][None, :]) ** 2
                D_te += (Xte[:, k][:, None] - Xtr[:, k][None, :]) ** 2
            added = m
            for gi, g in enumerate(gammas):
                K = np.exp(-g * D_tr)
                K_te = np.exp(-g * D_te)
                for ci, C in enumerate(Cs):
                    alpha, _, rho, *_ = solve_dual(K, fold.y_train, C, cfg.tol)
                    dec = K_te @ (alpha * fold.y_train) - rho
                    preds[mi, ci, gi, fold.test_rows] = dec > 0
    return GridOutcome(list(m_values), preds, evaluated, fold_of_row, skipped, users, violations)


def _grid_scores(outcome: GridOutcome, y: np.ndarray, averaging: str) -> np.ndarray:
    rows = outcome.evaluated_rows
    truth = y[rows] > 0
    pred = outcome.predictions[..., rows]
    if averaging == "pooled":
        return _pooled_f1(pred, truth)
    if averaging == "per_fold":
        folds = outcome.fold_of_row[rows]
        per = [_pooled_f1(pred[..., folds == f], truth[folds == f]) for f in np.unique(folds)]
        return np.mean(per, axis=0)
    raise ValueError(f"unknown f1_averaging {averaging!r}")


def _best(scores: np.ndarray) -> tuple[int, int, int]:
    # first maximum in (m, C, gamma) order
    flat = int(np.argmax(scores))
    return tuple(int(v) for v in np.unravel_index(flat, scores.shape))


# -- public entry points ------------------------------------------------------------

@dataclass
class EvaluationResult:
    scenario: Scenario
    mode: Mode
    metrics: Metrics
    per_platform: dict[str, Metrics]
    feature_names: list[str]
    feature_order: list[int]
    selected_features: list[str]
    chosen_c_exponent: int | None
    chosen_gamma_exponent: int | None
    n_folds: int
    skipped_folds: list[str]
    leakage_violations: int
    predictions: np.ndarray
    row_user_ids: np.ndarray
    row_platforms: np.ndarray
    row_labels: np.ndarray

    def report(self) -> dict:
        return {
            "precision": self.metrics.precision,
            "recall": self.metrics.recall,
            "f1": self.metrics.f1,
            "confusion": {"tp": self.metrics.tp, "fp": self.metrics.fp,
                          "tn": self.metrics.tn, "fn": self.metrics.fn},
            "selected_features": self.selected_features,
            "chosen_C_exponent": self.chosen_c_exponent,
            "chosen_gamma_exponent": self.chosen_gamma_exponent,
            "n_folds": self.n_folds,
            "skipped_folds": self.skipped_folds,
            "per_platform": {p: m.as_dict() for p, m in self.per_platform.items()},
        }


def rank_features(fm: FeatureMatrix, mode: Mode, mask: np.ndarray, cfg: EvalConfig,
                  seed: int) -> list[int]:
    if fm.dim < 2:
        return list(range(fm.dim))
    X, y = prepare_full(fm, mode, mask, cfg, _derive_seed(seed, 2))
    if np.unique(y).size < 2:
        return list(range(fm.dim))
    return svm_rfe_rank(X, y, cfg.rfe_grid, cfg.tol)


def louo_cross_validate(table: FeatureTable | FeatureMatrix, scenario: Scenario | str,
                        mode: Mode | str = Mode.NONE, config: EvalConfig = EvalConfig(),
                        seed: int = 0, log: ExclusionLog | None = None,
                        adapt_mask: np.ndarray | None = None,
                        feature_names: Sequence[str] | None = None) -> EvaluationResult:
    """Leave-one-user-out evaluation with feature-count and (C, gamma) selection."""
    scenario = Scenario(scenario)
    mode = parse_mode(mode)
    if isinstance(table, FeatureTable):
        fm, names, mask = scenario_matrix(table, scenario, log)
    else:
        fm = table
        names = list(feature_names) if feature_names else [f"x{k}" for k in range(fm.dim)]
        mask = np.ones(fm.dim, bool) if adapt_mask is None else np.asarray(adapt_mask, bool)
    users = sorted(set(fm.user_ids.tolist()))
    if len(users) < 2:
        raise ValueError("need at least two users")

    order = rank_features(fm, mode, mask, config, seed)
    if config.nested_cv:
        pred, evaluated, skipped, violations, choice = _nested(fm, order, mode, mask, config, seed, users)
        m_sel, c_exp, g_exp = choice
    else:
        outcome = run_grid(fm, order, mode, mask, config, seed, users)
        skipped, violations = outcome.skipped, outcome.leakage_violations
        evaluated = outcome.evaluated_rows
        if not evaluated.any():
            raise ValueError("every fold was skipped")
        scores = _grid_scores(outcome, fm.y, config.f1_averaging)
        mi, ci, gi = _best(scores)
        pred = outcome.predictions[mi, ci, gi]
        m_sel = outcome.m_values[mi]
        c_exp, g_exp = config.c_exponents[ci], config.gamma_exponents[gi]
    for u in skipped:
        if log is not None:
            log.add(f"evaluate:{scenario.value}:{mode.value}", "fold", u, "single_class_training")

    rows = np.flatnonzero(evaluated)
    metrics = f1_metrics(pred[rows], fm.y[rows], fm.user_ids[rows])
    per_platform = {}
    for p in sorted(set(fm.platforms[rows].astype(str).tolist())):
        r = rows[fm.platforms[rows].astype(str) == p]
        per_platform[p] = f1_metrics(pred[r], fm.y[r], fm.user_ids[r])
    return EvaluationResult(
        scenario=scenario, mode=mode, metrics=metrics, per_platform=per_platform,
        feature_names=list(names), feature_order=list(order),
        selected_features=[names[k] for k in order[:m_sel]] if m_sel else [],
        chosen_c_exponent=c_exp, chosen_gamma_exponent=g_exp,
        n_folds=len(users) - len(skipped), skipped_folds=skipped,
        leakage_violations=violations,
        predictions=np.where(evaluated, pred, False), row_user_ids=fm.user_ids,
        row_platforms=fm.platforms, row_labels=fm.y,
    )


def _nested(fm, order, mode, mask, cfg, seed, users):
    """Hyperparameters chosen per outer fold by an inner leave-one-user-out loop."""
    pred = np.zeros(len(fm), dtype=bool)
    evaluated = np.zeros(len(fm), dtype=bool)
    skipped, violations = [], 0
    choice = (None, None, None)
    for f_idx, user in enumerate(users):
        inner_users = [u for u in users if u != user]
        inner_fm = fm.take(np.flatnonzero(fm.user_ids != user))
        inner_order = rank_features(inner_fm, mode, mask, cfg, _derive_seed(seed, 3, f_idx))
        outcome = run_grid(inner_fm, inner_order, mode, mask, cfg, _derive_seed(seed, 4, f_idx),
                           inner_users)
        fold = prepare_fold(fm, user, mode, mask, cfg, _derive_seed(seed, 1, f_idx))
        violations += int(np.sum(fold.train_users == user)) + outcome.leakage_violations
        if not outcome.evaluated_rows.any() or np.unique(fold.y_train).size < 2:
            skipped.append(user)
            continue
        mi, ci, gi = _best(_grid_scores(outcome, inner_fm.y, cfg.f1_averaging))
        cols = list(inner_order[:outcome.m_values[mi]])
        C, g = 2.0 ** cfg.c_exponents[ci], 2.0 ** cfg.gamma_exponents[gi]
        Xtr, Xte = fold.X_train[:, cols], fold.X_test[:, cols]
        sq = (Xtr * Xtr).sum(1)
        K = np.exp(-g * np.maximum(sq[:, None] + sq[None, :] - 2 * Xtr @ Xtr.T, 0))
        K_te = np.exp(-g * np.maximum((Xte * Xte).sum(1)[:, None] + sq[None, :] - 2 * Xte @ Xtr.T, 0))
        alpha, _, rho, *_ = solve_dual(K, fold.y_train, C, cfg.tol)
        pred[fold.test_rows] = K_te @ (alpha * fold.y_train) - rho > 0
        evaluated[fold.test_rows] = True
        choice = (outcome.m_values[mi], cfg.c_exponents[ci], cfg.gamma_exponents[gi])
    return pred, evaluated, skipped, violations, choice


def compare_modes(table: FeatureTable, scenarios: Sequence[Scenario | str],
                  modes: Sequence[Mode | str], config: EvalConfig = EvalConfig(),
                  seed: int = 0, log: ExclusionLog | None = None) -> list[dict]:
    """One row per (scenario, mode) plus per-platform rows restricted to that platform's users."""
    if not scenarios:
        raise ValueError("empty scenario list")
    if len(modes) < 2:
        raise ValueError("compare_modes needs at least two modes")
    rows = []
    for scenario in scenarios:
        for mode in modes:
            res = louo_cross_validate(table, scenario, mode, config, seed, log)
            rows.append({"scenario": res.scenario.value, "mode": res.mode.value,
                         "platform": "all", **res.metrics.as_dict()})
            for p, m in res.per_platform.items():
                rows.append({"scenario": res.scenario.value, "mode": res.mode.value,
                             "platform": p, **m.as_dict()})
    return rows
