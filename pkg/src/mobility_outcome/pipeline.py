"""Stage functions shared by the command line and the demos.

Each stage takes plain inputs plus a :class:`PipelineConfig` and appends
exclusions to an :class:`ExclusionLog`; nothing here touches the output
directory except the explicit ``write_*`` helpers.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .adapt import AdaptationError, frobenius_gap
from .diagnostics import ExclusionLog
from .evaluate import (EvalConfig, Mode, Scenario, balance_platforms, fit_alignment,
                       parse_mode, scenario_matrix)
from .features import FEATURE_NAMES, FeatureParams, FeatureTable, extract_baseline, extract_features
from .fusion import FusionPolicy, FusionResult, fuse_user
from .ingest import RawCohort, filter_gps_accuracy, read_key_values
from .intervals import (Label, QidsInterval, apply_coverage_filter, build_qids_intervals,
                        label_intervals)
from .stats import CorrelationRow, correlation_table

logger = logging.getLogger(__name__)

ENV_PREFIX = "MOBOUT_"
MINUTE = 60.0
HOUR = 3600.0


def _ints(text: str) -> tuple[int, ...]:
    """``-15..15`` or ``-5,-3,0,3`` -> tuple of ints."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the pipeline; defaults are the standard settings.

    Durations are in minutes or hours as named.  Loaded from a flat
    ``key = value`` file, then overridden by ``MOBOUT_<KEY>`` environment
    variables, then by explicit command-line values.
    """

    manifest: str = ""
    synth: str = "default"
    synth_spec: str = ""          # optional key=value file of CohortSpec overrides
    timezone: str = ""
    out: str = "out"
    seed: int = 0

    gps_max_error_m: float = 165.0
    t_gps_android_min: float = 15.0
    t_wifi_weekday_day_h: float = 4.0
    t_wifi_weekend_day_h: float = 6.0
    t_wifi_night_h: float = 8.0
    day_start_hour: int = 6
    day_end_hour: int = 22
    ap_window_min: float = 5.0

    min_days: int = 5
    min_samples: int = 2000
    dbscan_eps_m: float = 20.0
    dbscan_min_pts: int = 160
    moving_speed_kmh: float = 1.0

    mode: str = "dual_transformed"
    scenarios: str = "all"
    modes: str = "none,dual_transformed"
    c_exponents: str = "-15..15"
    gamma_exponents: str = "-15..15"
    rfe_c_exponents: str = ""
    rfe_gamma_exponents: str = ""
    min_features: int = 2
    svm_tol: float = 1e-3
    ridge: float = 1.0
    align_scale: str = "pooled"
    balance_mode: str = "auto"
    minority_factor: int = 4
    global_factor: float = 1.4
    balance_scope: str = "fold"
    f1_averaging: str = "pooled"
    nested_cv: bool = False

    def __post_init__(self):
        parse_mode(self.mode)
        for m in self.mode_list:
            parse_mode(m)
        self.scenario_list  # validates names
        if self.gps_max_error_m <= 0 or self.min_days < 0 or self.min_samples < 0:
            raise ValueError("thresholds must be positive")
        if self.balance_mode not in ("auto", "fixed", "off"):
            raise ValueError(f"unknown balance_mode {self.balance_mode!r}")
        if self.balance_scope not in ("fold", "global"):
            raise ValueError(f"unknown balance_scope {self.balance_scope!r}")
        if self.f1_averaging not in ("pooled", "per_fold"):
            raise ValueError(f"unknown f1_averaging {self.f1_averaging!r}")

    # -- construction -----------------------------------------------------------
    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().lower().replace("-", "_")
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            kind = type(getattr(cls(), key))
            kwargs[key] = _bool(raw) if kind is bool else kind(raw)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path | None = None, env: Mapping[str, str] | None = None,
             overrides: Mapping[str, object] | None = None) -> "PipelineConfig":
        values: dict[str, str] = {}
        base = Path(".")
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise FileNotFoundError(f"config not found: {path}")
            values.update(read_key_values(path))
            base = path.parent
        env = os.environ if env is None else env
        names = {f.name for f in fields(cls)}
        for key, raw in env.items():
            if key.startswith(ENV_PREFIX) and key[len(ENV_PREFIX):].lower() in names:
                values[key[len(ENV_PREFIX):].lower()] = raw
        for key in ("manifest", "synth_spec"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(base / values[key])
        cfg = cls.from_mapping(values)
        if overrides:
            cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
        return cfg

    # -- derived views ------------------------------------------------------------
    @property
    def mode_list(self) -> list[str]:
        return [m.strip() for m in self.modes.split(",") if m.strip()]

    @property
    def scenario_list(self) -> list[Scenario]:
        return parse_scenarios(self.scenarios)

    def fusion_policy(self) -> FusionPolicy:
        return FusionPolicy(self.t_gps_android_min * MINUTE, self.t_wifi_weekday_day_h * HOUR,
                            self.t_wifi_weekend_day_h * HOUR, self.t_wifi_night_h * HOUR,
                            self.day_start_hour, self.day_end_hour, self.ap_window_min * MINUTE)

    def feature_params(self) -> FeatureParams:
        return FeatureParams(self.dbscan_eps_m, self.dbscan_min_pts, self.moving_speed_kmh)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            c_exponents=_ints(self.c_exponents), gamma_exponents=_ints(self.gamma_exponents),
            rfe_c_exponents=_ints(self.rfe_c_exponents) if self.rfe_c_exponents else None,
            rfe_gamma_exponents=_ints(self.rfe_gamma_exponents) if self.rfe_gamma_exponents else None,
            min_features=self.min_features, tol=self.svm_tol, ridge=self.ridge,
            align_scale=self.align_scale,
            balance_mode=self.balance_mode, minority_factor=self.minority_factor,
            global_factor=self.global_factor, balance_scope=self.balance_scope,
            f1_averaging=self.f1_averaging, nested_cv=self.nested_cv)


SCENARIO_ALIASES = {"all_features": Scenario.ALL}


def parse_scenarios(text: str) -> list[Scenario]:
    """Comma list of scenario names; ``all`` expands to every scenario.

    ``all_features`` names the single scenario that uses every column.
    """
    out: list[Scenario] = []
    for part in (p.strip().lower() for p in text.split(",")):
        if not part:
            continue
        if part == "all":
            out.extend(Scenario)
        elif part in SCENARIO_ALIASES:
            out.append(SCENARIO_ALIASES[part])
        else:
            out.append(Scenario(part))
    return list(dict.fromkeys(out))


# -- fusion and features -------------------------------------------------------------

@dataclass
class FeatureStage:
    table: FeatureTable
    intervals: list[QidsInterval]
    fusion: dict[str, FusionResult]
    notes: dict[str, list[str]] = field(default_factory=dict)


def fuse_cohort(raw: RawCohort, cfg: PipelineConfig,
                log: ExclusionLog | None = None) -> dict[str, FusionResult]:
    policy = cfg.fusion_policy()
    out = {}
    for u in raw.users:
        locs = raw.locations.get(u, [])
        kept = filter_gps_accuracy(locs, cfg.gps_max_error_m)
        if log is not None and len(kept) < len(locs):
            logger.info("%s: %d fixes above %.0f m dropped", u, len(locs) - len(kept),
                        cfg.gps_max_error_m)
        out[u] = fuse_user(u, kept, raw.wifi.get(u, []), raw.platforms[u],
                           raw.timezones.get(u, "UTC"), policy)
        if log is not None and len(out[u].track) == 0:
            log.add("fusion", "user", u, "empty_track")
    return out


def build_feature_table(raw: RawCohort, cfg: PipelineConfig, log: ExclusionLog,
                        fusion: dict[str, FusionResult] | None = None) -> FeatureStage:
    """Fuse, cut into intervals, filter, label, and compute features for every user."""
    fusion = fuse_cohort(raw, cfg, log) if fusion is None else fusion
    params = cfg.feature_params()
    rows, kept_intervals, notes = [], [], {}
    for u in raw.users:
        res = fusion.get(u)
        base = raw.baseline(u)
        if base is None:
            log.add("intervals", "user", u, "no_baseline_qids")
            continue
        if res is None or len(res.track) == 0:
            continue
        ivs = build_qids_intervals(res.track, raw.qids.get(u, []))
        if not ivs:
            log.add("intervals", "user", u, "no_followup_qids")
            continue
        ivs, excluded = apply_coverage_filter(ivs, cfg.min_days, cfg.min_samples, log)
        if excluded:
            continue
        ivs = label_intervals(ivs, raw.cgi.get(u, []), base.date, log)
        if not ivs:
            log.add("labels", "user", u, "no_labeled_interval")
            continue
        bundle = extract_baseline(res.track, base.date, base.score, params)
        user_notes: list[str] = []
        for iv in ivs:
            fv = extract_features(iv, None, params, user_notes)
            rows.append({
                "user_id": u, "platform": raw.platforms[u], "end_date": iv.end_date.isoformat(),
                "label": iv.label is Label.IMPROVED, "location": fv.as_array(),
                "baseline": None if bundle.location_baseline is None
                else bundle.location_baseline.as_array(),
                "qids": iv.qids_score, "qids_baseline": base.score,
            })
            kept_intervals.append(iv)
        if bundle.missing_reason:
            user_notes.append(bundle.missing_reason)
        if user_notes:
            notes[u] = user_notes
    return FeatureStage(FeatureTable.from_rows(rows), kept_intervals, fusion, notes)


# -- adaptation diagnostics and correlations ----------------------------------------

def adaptation_diagnostics(table: FeatureTable, cfg: PipelineConfig,
                           modes: list[str] | None = None) -> dict:
    """Covariance gap between platforms before and after each alignment mode.

    Alignment is fitted on the platform-balanced location features and the
    gap is measured on the original rows, with every column divided by its
    pooled standard deviation so that no single unit dominates the norm.
    """
    ecfg = cfg.eval_config()
    fm, _, mask = scenario_matrix(table, Scenario.LOCATION)
    plat = fm.platforms.astype(str)
    out = {"n_android": int(np.sum(plat == "android")), "n_ios": int(np.sum(plat == "ios")),
           "modes": {}}
    if out["n_android"] < 2 or out["n_ios"] < 2:
        out["error"] = "a platform has fewer than two rows"
        return out
    sd = fm.X.std(axis=0)
    sd[sd == 0] = 1.0

    def gap(X: np.ndarray) -> float:
        return frobenius_gap(X[plat == "android"] / sd, X[plat == "ios"] / sd)

    before = gap(fm.X)
    balanced = balance_platforms(fm, ecfg, cfg.seed)
    for m in modes or ["none", "android_transformed", "ios_transformed", "dual_transformed"]:
        mode = parse_mode(m)
        X = fit_alignment(balanced, mode, mask, ecfg.ridge, ecfg.align_scale)(fm)
        out["modes"][mode.value] = {"frobenius_before": before, "frobenius_after": gap(X)}
    return out


def correlations(table: FeatureTable, cfg: PipelineConfig,
                 mode: str | Mode = Mode.DUAL_TRANSFORMED) -> list[CorrelationRow]:
    """Feature-vs-QIDS correlations on aligned features, stratified by outcome."""
    fm, _, mask = scenario_matrix(table, Scenario.LOCATION)
    X = fm.X
    mode = parse_mode(mode)
    if mode is not Mode.NONE:
        try:
            balanced = balance_platforms(fm, cfg.eval_config(), cfg.seed)
            X = fit_alignment(balanced, mode, mask, cfg.ridge, cfg.align_scale)(fm)
        except AdaptationError as exc:
            logger.warning("correlations on unaligned features: %s", exc)
    ok = np.all(np.isfinite(table.location), axis=1)
    return correlation_table(X, table.qids[ok], table.labels[ok], FEATURE_NAMES)
