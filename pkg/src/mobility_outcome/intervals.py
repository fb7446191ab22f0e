"""Questionnaire-aligned analysis units and their improvement labels."""

from __future__ import annotations

import csv
import dataclasses
import enum
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence

from .diagnostics import ExclusionLog
from .fusion import MinuteTrack
from .ingest import CgiRecord, QidsRecord

INTERVAL_DAYS = 7
DEFAULT_MIN_DAYS = 5
DEFAULT_MIN_SAMPLES = 2000
IMPROVED_CGI = (1, 2)


class Label(str, enum.Enum):
    IMPROVED = "improved"
    NOT_IMPROVED = "not_improved"
    UNLABELED = "unlabeled"


@dataclass(frozen=True)
class QidsInterval:
    user_id: str
    end_date: date
    qids_score: int
    track_slice: MinuteTrack
    days_with_data: int
    sample_count: int
    label: Label = Label.UNLABELED

    @property
    def start_date(self) -> date:
        return self.end_date - timedelta(days=INTERVAL_DAYS - 1)

    @property
    def day_span(self) -> list[date]:
        return [self.start_date + timedelta(days=k) for k in range(INTERVAL_DAYS)]


@dataclass(frozen=True, slots=True)
class ImprovementPeriod:
    user_id: str
    start_day: date  # exclusive
    end_day: date    # inclusive
    status: Label


def build_qids_intervals(track: MinuteTrack, qids: Iterable[QidsRecord]) -> list[QidsInterval]:
    """One interval per non-baseline questionnaire: the 7 local days ending on its date."""
    out = []
    for rec in sorted(qids, key=lambda r: r.date):
        if rec.is_baseline:
            continue
        first = rec.date - timedelta(days=INTERVAL_DAYS - 1)
        piece = track.between_days(first, rec.date)
        out.append(QidsInterval(rec.user_id, rec.date, rec.score, piece,
                                piece.days_with_data, piece.sample_count))
    return out


def apply_coverage_filter(intervals: Sequence[QidsInterval], min_days: int = DEFAULT_MIN_DAYS,
                          min_samples: int = DEFAULT_MIN_SAMPLES,
                          log: ExclusionLog | None = None) -> tuple[list[QidsInterval], list[str]]:
    """Keep intervals with enough days and samples.

    Returns the kept intervals and the users left with none.
    """
    kept = []
    seen_users: dict[str, bool] = {}
    for iv in intervals:
        ok = iv.days_with_data >= min_days and iv.sample_count >= min_samples
        seen_users[iv.user_id] = seen_users.get(iv.user_id, False) or ok
        if ok:
            kept.append(iv)
        elif log is not None:
            reason = "too_few_days" if iv.days_with_data < min_days else "too_few_samples"
            log.add("coverage", "interval", iv.user_id, reason, iv.end_date.isoformat())
    excluded = sorted(u for u, any_kept in seen_users.items() if not any_kept)
    if log is not None:
        for u in excluded:
            log.add("coverage", "user", u, "no_interval_passes_coverage")
    return kept, excluded


def improvement_periods(cgi: Iterable[CgiRecord], enrollment_day: date) -> list[ImprovementPeriod]:
    """Each assessment labels the days since the previous one (or enrollment)."""
    periods = []
    prev = enrollment_day
    for rec in sorted(cgi, key=lambda r: r.date):
        if rec.date <= prev:
            continue
        status = Label.IMPROVED if rec.cgi_i in IMPROVED_CGI else Label.NOT_IMPROVED
        periods.append(ImprovementPeriod(rec.user_id, prev, rec.date, status))
        prev = rec.date
    return periods


def label_for(day: date, periods: Sequence[ImprovementPeriod]) -> Label:
    for p in periods:
        if p.start_day < day <= p.end_day:
            return p.status
    return Label.UNLABELED


def label_intervals(intervals: Sequence[QidsInterval], cgi: Iterable[CgiRecord],
                    enrollment_day: date, log: ExclusionLog | None = None) -> list[QidsInterval]:
    """Attach labels by the period containing each interval's end date.

    Intervals outside every period are dropped (and logged).
    """
    periods = improvement_periods(cgi, enrollment_day)
    out = []
    for iv in intervals:
        label = label_for(iv.end_date, periods)
        if label is Label.UNLABELED:
            if log is not None:
                reason = "no_cgi" if not periods else "outside_cgi_periods"
                log.add("labels", "interval", iv.user_id, reason, iv.end_date.isoformat())
            continue
        out.append(dataclasses.replace(iv, label=label))
    return out


INTERVAL_COLUMNS = ["user_id", "end_date", "days_with_data", "sample_count", "qids", "label"]


def write_intervals_csv(intervals: Iterable[QidsInterval], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INTERVAL_COLUMNS)
        for iv in intervals:
            writer.writerow([iv.user_id, iv.end_date.isoformat(), iv.days_with_data,
                             iv.sample_count, iv.qids_score, iv.label.value])
