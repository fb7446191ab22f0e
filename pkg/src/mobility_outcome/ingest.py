"""Parsing and validation of the raw record streams.

A cohort is described by a manifest: a flat ``key = value`` text file
pointing at five CSV files::

    locations = locations.csv
    wifi = wifi.csv
    qids = qids.csv
    cgi = cgi.csv
    platforms = platforms.csv
    timezone = America/New_York   # optional cohort-wide default

Relative paths are resolved against the manifest's directory.  Malformed
rows never abort a load; each one is recorded as a :class:`Rejection`.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable

logger = logging.getLogger(__name__)

LOCATION_COLUMNS = ["user_id", "timestamp", "lat", "lon", "accuracy_m"]
WIFI_COLUMNS = ["user_id", "timestamp", "ap_id", "kind"]
QIDS_COLUMNS = ["user_id", "date", "score", "is_baseline"]
CGI_COLUMNS = ["user_id", "date", "cgi_i"]
PLATFORM_COLUMNS = ["user_id", "platform", "timezone"]
MANIFEST_KEYS = ("locations", "wifi", "qids", "cgi", "platforms")

PLATFORMS = ("android", "ios")
DEFAULT_GPS_MAX_ERROR_M = 165.0
MIN_BASELINE_QIDS = 11


class CohortLoadError(RuntimeError):
    """Raised for problems that make a cohort unusable as a whole."""


@dataclass(frozen=True, slots=True)
class LocationSample:
    user_id: str
    timestamp: float
    latitude: float
    longitude: float
    accuracy_m: float
    source: str = "gps"


@dataclass(frozen=True, slots=True)
class WifiEvent:
    user_id: str
    timestamp: float
    ap_id: str
    kind: str  # "associate" | "dissociate"


@dataclass(frozen=True, slots=True)
class QidsRecord:
    user_id: str
    date: date
    score: int
    is_baseline: bool


@dataclass(frozen=True, slots=True)
class CgiRecord:
    user_id: str
    date: date
    cgi_i: int


@dataclass(frozen=True, slots=True)
class Rejection:
    stream: str
    line: int
    reason: str
    row: tuple[str, ...] = ()


@dataclass
class RawCohort:
    """All parsed records, grouped per user and time-sorted."""

    platforms: dict[str, str]
    timezones: dict[str, str]
    locations: dict[str, list[LocationSample]] = field(default_factory=dict)
    wifi: dict[str, list[WifiEvent]] = field(default_factory=dict)
    qids: dict[str, list[QidsRecord]] = field(default_factory=dict)
    cgi: dict[str, list[CgiRecord]] = field(default_factory=dict)
    rejections: list[Rejection] = field(default_factory=list)
    duplicates: dict[str, int] = field(default_factory=dict)

    @property
    def users(self) -> list[str]:
        return sorted(self.platforms)

    def n_samples(self) -> int:
        return sum(len(v) for v in self.locations.values())

    def baseline(self, user_id: str) -> QidsRecord | None:
        for rec in self.qids.get(user_id, []):
            if rec.is_baseline:
                return rec
        return None

    def enrollment_day(self, user_id: str) -> date | None:
        rec = self.baseline(user_id)
        return rec.date if rec is not None else None


def filter_gps_accuracy(samples: Iterable[LocationSample],
                        max_error_m: float = DEFAULT_GPS_MAX_ERROR_M) -> list[LocationSample]:
    """Drop fixes whose reported error exceeds ``max_error_m``.

    Equality is kept: only errors strictly larger than the threshold go.
    """
    return [s for s in samples if s.accuracy_m <= max_error_m]


# -- manifest ----------------------------------------------------------------

def read_key_values(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CohortLoadError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def read_manifest(path: str | Path) -> dict[str, Path]:
    path = Path(path)
    if not path.is_file():
        raise CohortLoadError(f"manifest not found: {path}")
    entries = read_key_values(path)
    missing = [k for k in MANIFEST_KEYS if k not in entries]
    if missing:
        raise CohortLoadError(f"manifest {path} lacks keys: {', '.join(missing)}")
    resolved = {}
    for key, value in entries.items():
        if key in MANIFEST_KEYS:
            p = Path(value)
            resolved[key] = p if p.is_absolute() else path.parent / p
    for key in MANIFEST_KEYS:
        if not resolved[key].is_file():
            raise CohortLoadError(f"missing {key} file: {resolved[key]}")
    return resolved


# -- row parsers: return a record or raise ValueError(reason) -------------------

def _finite(value: str, name: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise ValueError(f"{name} not a number") from None
    if not math.isfinite(x):
        raise ValueError(f"{name} not finite")
    return x


def _integer(value: str, name: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"{name} not an integer") from None


def _day(value: str) -> date:
    try:
        return date.fromisoformat(value)
    except ValueError:
        raise ValueError("date not ISO-8601") from None


def _user(value: str) -> str:
    if not value:
        raise ValueError("empty user_id")
    return value


def _parse_location(row: dict[str, str]) -> LocationSample:
    lat = _finite(row["lat"], "latitude")
    lon = _finite(row["lon"], "longitude")
    if not -90.0 <= lat <= 90.0:
        raise ValueError("latitude out of range")
    if not -180.0 <= lon <= 180.0:
        raise ValueError("longitude out of range")
    acc = _finite(row["accuracy_m"], "accuracy_m")
    if acc < 0:
        raise ValueError("negative accuracy")
    return LocationSample(_user(row["user_id"]), _finite(row["timestamp"], "timestamp"),
                          lat, lon, acc)


def _parse_wifi(row: dict[str, str]) -> WifiEvent:
    kind = row["kind"].strip().lower()
    if kind not in ("associate", "dissociate"):
        raise ValueError("unknown wifi event kind")
    if not row["ap_id"]:
        raise ValueError("empty ap_id")
    return WifiEvent(_user(row["user_id"]), _finite(row["timestamp"], "timestamp"),
                     row["ap_id"], kind)


_TRUE = {"1", "true", "yes", "t"}
_FALSE = {"0", "false", "no", "f"}


def _parse_qids(row: dict[str, str]) -> QidsRecord:
    score = _integer(row["score"], "score")
    if not 0 <= score <= 27:
        raise ValueError("qids score out of range")
    flag = row["is_baseline"].strip().lower()
    if flag not in _TRUE | _FALSE:
        raise ValueError("is_baseline not boolean")
    return QidsRecord(_user(row["user_id"]), _day(row["date"]), score, flag in _TRUE)


def _parse_cgi(row: dict[str, str]) -> CgiRecord:
    value = _integer(row["cgi_i"], "cgi_i")
    if not 1 <= value <= 7:
        raise ValueError("cgi_i out of range")
    return CgiRecord(_user(row["user_id"]), _day(row["date"]), value)


def _read_stream(path: Path, stream: str, columns: list[str], parse,
                 rejections: list[Rejection]) -> list:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != columns:
            raise CohortLoadError(f"{path}: expected header {','.join(columns)}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(columns):
                rejections.append(Rejection(stream, lineno, "wrong field count", tuple(row)))
                continue
            try:
                records.append(parse(dict(zip(columns, (v.strip() for v in row)))))
            except ValueError as exc:
                rejections.append(Rejection(stream, lineno, str(exc), tuple(row)))
    return records


def _group(records: list, key=lambda r: r.user_id) -> dict[str, list]:
    grouped: dict[str, list] = defaultdict(list)
    for rec in records:
        grouped[key(rec)].append(rec)
    return dict(grouped)


def _dedup_locations(samples: list[LocationSample], rejections: list[Rejection]) -> tuple[list[LocationSample], int]:
    """Stable sort by time; exact duplicates collapse to the first occurrence."""
    seen: set[tuple] = set()
    by_time: dict[float, LocationSample] = {}
    out = []
    dups = 0
    for s in sorted(samples, key=lambda s: s.timestamp):
        key = (s.timestamp, s.latitude, s.longitude)
        if key in seen:
            dups += 1
            continue
        seen.add(key)
        if s.timestamp in by_time:
            rejections.append(Rejection("locations", 0, "conflicting fix at same timestamp",
                                        (s.user_id, repr(s.timestamp))))
            continue
        by_time[s.timestamp] = s
        out.append(s)
    return out, dups


def _dedup_wifi(events: list[WifiEvent], rejections: list[Rejection]) -> tuple[list[WifiEvent], int]:
    out = []
    dups = 0
    seen: set[tuple] = set()
    last_kind: dict[str, str] = {}
    for e in sorted(events, key=lambda e: e.timestamp):
        key = (e.timestamp, e.ap_id, e.kind)
        if key in seen:
            dups += 1
            continue
        seen.add(key)
        if last_kind.get(e.ap_id) == e.kind:
            rejections.append(Rejection("wifi", 0, f"repeated {e.kind} without counterpart",
                                        (e.user_id, repr(e.timestamp), e.ap_id)))
            continue
        last_kind[e.ap_id] = e.kind
        out.append(e)
    return out, dups


def _check_qids(records: list[QidsRecord], rejections: list[Rejection]) -> list[QidsRecord]:
    out = []
    has_baseline = False
    for rec in sorted(records, key=lambda r: r.date):
        if rec.is_baseline:
            if has_baseline:
                rejections.append(Rejection("qids", 0, "second baseline record",
                                            (rec.user_id, rec.date.isoformat())))
                continue
            if rec.score < MIN_BASELINE_QIDS:
                rejections.append(Rejection("qids", 0, "baseline score below enrollment cutoff",
                                            (rec.user_id, rec.date.isoformat())))
                continue
            has_baseline = True
        out.append(rec)
    return out


def load_cohort(manifest_path: str | Path, default_timezone: str | None = None) -> RawCohort:
    """Read a manifest and all streams it references."""
    paths = read_manifest(manifest_path)
    entries = read_key_values(manifest_path)
    default_tz = default_timezone or entries.get("timezone", "UTC")

    rejections: list[Rejection] = []
    platforms: dict[str, str] = {}
    timezones: dict[str, str] = {}
    for rec in _read_stream(paths["platforms"], "platforms", PLATFORM_COLUMNS,
                            lambda row: row, rejections):
        platform = rec["platform"].lower()
        if platform not in PLATFORMS:
            rejections.append(Rejection("platforms", 0, "unknown platform", tuple(rec.values())))
            continue
        platforms[rec["user_id"]] = platform
        timezones[rec["user_id"]] = rec["timezone"] or default_tz

    locations = _read_stream(paths["locations"], "locations", LOCATION_COLUMNS,
                             _parse_location, rejections)
    wifi = _read_stream(paths["wifi"], "wifi", WIFI_COLUMNS, _parse_wifi, rejections)
    qids = _read_stream(paths["qids"], "qids", QIDS_COLUMNS, _parse_qids, rejections)
    cgi = _read_stream(paths["cgi"], "cgi", CGI_COLUMNS, _parse_cgi, rejections)

    return assemble_cohort(platforms, timezones, locations, wifi, qids, cgi, rejections)


def assemble_cohort(platforms: dict[str, str], timezones: dict[str, str],
                    locations: list[LocationSample], wifi: list[WifiEvent],
                    qids: list[QidsRecord], cgi: list[CgiRecord],
                    rejections: list[Rejection] | None = None) -> RawCohort:
    """Group, sort, and deduplicate already-parsed records."""
    rejections = [] if rejections is None else rejections
    untagged = sorted({r.user_id for stream in (locations, wifi, qids, cgi) for r in stream}
                      - set(platforms))
    if untagged:
        raise CohortLoadError(f"users without platform tag: {', '.join(untagged)}")

    cohort = RawCohort(platforms=dict(platforms), timezones=dict(timezones),
                       rejections=rejections)
    loc_dups = wifi_dups = 0
    for user, recs in _group(locations).items():
        cohort.locations[user], n = _dedup_locations(recs, rejections)
        loc_dups += n
    for user, recs in _group(wifi).items():
        cohort.wifi[user], n = _dedup_wifi(recs, rejections)
        wifi_dups += n
    for user, recs in _group(qids).items():
        cohort.qids[user] = _check_qids(recs, rejections)
    for user, recs in _group(cgi).items():
        cohort.cgi[user] = sorted(recs, key=lambda r: r.date)
    cohort.duplicates = {"locations": loc_dups, "wifi": wifi_dups}
    logger.info("loaded cohort: %d users, %d location samples, %d rejections",
                len(cohort.platforms), cohort.n_samples(), len(rejections))
    return cohort


def _fmt(x: float) -> str:
    return repr(float(x)) if not float(x).is_integer() else str(int(x))


def write_cohort(cohort: RawCohort, directory: str | Path, default_timezone: str = "UTC") -> Path:
    """Serialize a cohort in the ingest formats; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def dump(name: str, header: list[str], rows: Iterable[list]) -> None:
        with open(directory / name, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)

    users = cohort.users
    dump("platforms.csv", PLATFORM_COLUMNS,
         ([u, cohort.platforms[u], cohort.timezones.get(u, "")] for u in users))
    dump("locations.csv", LOCATION_COLUMNS,
         ([s.user_id, _fmt(s.timestamp), repr(float(s.latitude)), repr(float(s.longitude)), _fmt(s.accuracy_m)]
          for u in users for s in cohort.locations.get(u, [])))
    dump("wifi.csv", WIFI_COLUMNS,
         ([e.user_id, _fmt(e.timestamp), e.ap_id, e.kind]
          for u in users for e in cohort.wifi.get(u, [])))
    dump("qids.csv", QIDS_COLUMNS,
         ([r.user_id, r.date.isoformat(), r.score, "1" if r.is_baseline else "0"]
          for u in users for r in cohort.qids.get(u, [])))
    dump("cgi.csv", CGI_COLUMNS,
         ([r.user_id, r.date.isoformat(), r.cgi_i] for u in users for r in cohort.cgi.get(u, [])))
    manifest = directory / "manifest.txt"
    manifest.write_text("".join(f"{k} = {k}.csv\n" for k in MANIFEST_KEYS)
                        + f"timezone = {default_timezone}\n")
    return manifest
