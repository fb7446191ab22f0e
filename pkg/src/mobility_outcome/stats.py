"""Pearson correlation of features against questionnaire scores."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .features import FEATURE_NAMES

STRATA = ("all", "improved", "not_improved")


def pearson(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Sample correlation and two-sided p-value (t test, n-2 dof)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D of equal length")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("undefined correlation: constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * float(stats.t.sf(abs(t), n - 2))
    return r, min(p, 1.0)


@dataclass(frozen=True)
class CorrelationRow:
    feature: str
    stratum: str
    r: float
    p: float
    n: int
    available: bool = True


def correlation_table(features: np.ndarray, qids: Sequence[float], labels: Sequence[int],
                      names: Sequence[str] = FEATURE_NAMES) -> list[CorrelationRow]:
    """Rows of (r, p) for every feature in each stratum (all / improved / not improved)."""
    F = np.asarray(features, dtype=float)
    q = np.asarray(qids, dtype=float)
    lab = np.asarray(labels).astype(bool)
    masks = {"all": np.ones(lab.size, dtype=bool), "improved": lab, "not_improved": ~lab}
    rows = []
    for k, name in enumerate(names):
        for stratum in STRATA:
            m = masks[stratum]
            try:
                r, p = pearson(F[m, k], q[m])
            except ValueError:
                rows.append(CorrelationRow(name, stratum, math.nan, math.nan, int(m.sum()), False))
                continue
            rows.append(CorrelationRow(name, stratum, r, p, int(m.sum())))
    return rows


def write_correlations_csv(rows: Sequence[CorrelationRow], path: str | Path) -> None:
    """Wide layout: one line per feature, (r, p) per stratum."""
    by_key = {(r.feature, r.stratum): r for r in rows}
    features = list(dict.fromkeys(r.feature for r in rows))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["feature"] + [f"{s}_{v}" for s in STRATA for v in ("r", "p")])
        for f in features:
            line = [f]
            for s in STRATA:
                row = by_key.get((f, s))
                if row is None or not row.available:
                    line += ["NA", "NA"]
                else:
                    line += [f"{row.r:.6g}", f"{row.p:.6g}"]
            writer.writerow(line)
