"""GPS / WiFi fusion onto a regular one-minute grid.

Two steps per user: access points are placed at the mean of the GPS fixes
seen around their association events, then every GPS fix and every
association with a localized AP becomes a point whose location is held for
a platform- and time-dependent validity period.  The resulting windows are
sampled on whole-minute UTC boundaries.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .ingest import LocationSample, WifiEvent

logger = logging.getLogger(__name__)

MINUTE = 60
HOUR = 3600

SOURCE_GPS = "gps"
SOURCE_WIFI = "wifi"


@dataclass(frozen=True)
class FusionPolicy:
    """Validity durations (seconds) and the AP localization window."""

    t_gps_android: float = 15 * MINUTE
    t_wifi_weekday_day: float = 4 * HOUR
    t_wifi_weekend_day: float = 6 * HOUR
    t_wifi_night: float = 8 * HOUR
    day_start_hour: int = 6
    day_end_hour: int = 22
    ap_window: float = 5 * MINUTE

    def __post_init__(self):
        for name in ("t_gps_android", "t_wifi_weekday_day", "t_wifi_weekend_day",
                     "t_wifi_night", "ap_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.day_start_hour < self.day_end_hour <= 24:
            raise ValueError("day window must satisfy 0 <= start < end <= 24")


@dataclass(frozen=True, slots=True)
class ApLocation:
    ap_id: str
    latitude: float
    longitude: float
    support_count: int


@dataclass(frozen=True, slots=True)
class ValidityWindow:
    start: float
    end: float
    latitude: float
    longitude: float
    source: str


@dataclass
class FusionDiagnostics:
    unlocalized_ap_points: int = 0
    timestamp_ties: int = 0
    dissociate_clips: int = 0
    zero_length_points: int = 0


def local_calendar(timestamps: np.ndarray, tz: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Local (date, hour, weekday) for UTC epoch seconds.

    Dates come back as ``datetime64[D]``; weekday uses Monday = 0.
    """
    ts = np.asarray(timestamps, dtype=float)
    if ts.size == 0:
        return (np.empty(0, dtype="datetime64[D]"), np.empty(0, dtype=np.int8),
                np.empty(0, dtype=np.int8))
    idx = pd.to_datetime(ts, unit="s", utc=True).tz_convert(tz)
    local_naive = idx.tz_localize(None).values
    days = local_naive.astype("datetime64[D]")
    return days, np.asarray(idx.hour, dtype=np.int8), np.asarray(idx.dayofweek, dtype=np.int8)


@dataclass
class MinuteTrack:
    """Piecewise-constant location track sampled at whole minutes.

    ``minutes`` holds UTC epoch seconds (multiples of 60).  Local calendar
    fields are derived once from ``tz`` and carried through slicing.
    """

    user_id: str
    minutes: np.ndarray
    latitude: np.ndarray
    longitude: np.ndarray
    source: np.ndarray
    tz: str = "UTC"
    local_date: np.ndarray = field(default=None, repr=False)
    local_hour: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.minutes = np.asarray(self.minutes, dtype=np.int64)
        self.latitude = np.asarray(self.latitude, dtype=float)
        self.longitude = np.asarray(self.longitude, dtype=float)
        self.source = np.asarray(self.source, dtype="<U4")
        if self.local_date is None or self.local_hour is None:
            self.local_date, self.local_hour, _ = local_calendar(self.minutes, self.tz)

    def __len__(self) -> int:
        return int(self.minutes.size)

    @property
    def sample_count(self) -> int:
        return len(self)

    @property
    def days_with_data(self) -> int:
        return int(np.unique(self.local_date).size)

    def select(self, mask: np.ndarray) -> "MinuteTrack":
        return MinuteTrack(self.user_id, self.minutes[mask], self.latitude[mask],
                           self.longitude[mask], self.source[mask], self.tz,
                           self.local_date[mask], self.local_hour[mask])

    def between_days(self, first, last) -> "MinuteTrack":
        """Points whose local date lies in ``[first, last]`` (inclusive)."""
        first = np.datetime64(first, "D")
        last = np.datetime64(last, "D")
        return self.select((self.local_date >= first) & (self.local_date <= last))

    @classmethod
    def empty(cls, user_id: str = "", tz: str = "UTC") -> "MinuteTrack":
        return cls(user_id, np.empty(0, np.int64), np.empty(0), np.empty(0),
                   np.empty(0, "<U4"), tz)


def localize_access_points(gps: Sequence[LocationSample], events: Sequence[WifiEvent],
                           policy: FusionPolicy = FusionPolicy()) -> dict[str, ApLocation]:
    """Place each AP at the mean of GPS fixes near its association events.

    A fix supports an AP when it lies within ``policy.ap_window`` seconds
    (inclusive) of at least one associate event for that AP; each fix is
    counted once per AP.
    """
    if not gps:
        return {}
    t = np.array([s.timestamp for s in gps])
    lat = np.array([s.latitude for s in gps])
    lon = np.array([s.longitude for s in gps])
    order = np.argsort(t, kind="stable")
    t, lat, lon = t[order], lat[order], lon[order]

    by_ap: dict[str, list[float]] = defaultdict(list)
    for e in events:
        if e.kind == "associate":
            by_ap[e.ap_id].append(e.timestamp)

    out = {}
    for ap_id in sorted(by_ap):
        times = np.asarray(by_ap[ap_id])
        lo = np.searchsorted(t, times - policy.ap_window, side="left")
        hi = np.searchsorted(t, times + policy.ap_window, side="right")
        mask = np.zeros(t.size, dtype=bool)
        for a, b in zip(lo, hi):
            mask[a:b] = True
        n = int(mask.sum())
        if n:
            out[ap_id] = ApLocation(ap_id, float(lat[mask].mean()), float(lon[mask].mean()), n)
    return out


def _next_dissociate(events: Sequence[WifiEvent]) -> dict[str, np.ndarray]:
    times: dict[str, list[float]] = defaultdict(list)
    for e in events:
        if e.kind == "dissociate":
            times[e.ap_id].append(e.timestamp)
    return {ap: np.sort(np.asarray(v)) for ap, v in times.items()}


def build_validity_windows(samples: Sequence[LocationSample], ap_locs: dict[str, ApLocation],
                           events: Sequence[WifiEvent], platform: str,
                           policy: FusionPolicy = FusionPolicy(), tz: str = "UTC",
                           diagnostics: FusionDiagnostics | None = None) -> list[ValidityWindow]:
    """Turn merged GPS/WiFi points into non-overlapping validity windows.

    Each point at ``t_i`` holds for ``[t_i, min(t_i + T, t_{i+1}))`` where T
    depends on platform, source, and the local time at ``t_i``.  WiFi
    windows are additionally clipped at an intervening dissociate event for
    the same AP.  The last point keeps its full T.
    """
    diag = diagnostics if diagnostics is not None else FusionDiagnostics()

    # (time, priority, lat, lon, source, ap_id); GPS sorts before WiFi on ties
    points: list[tuple] = [(s.timestamp, 0, s.latitude, s.longitude, SOURCE_GPS, "")
                           for s in samples]
    for e in events:
        if e.kind != "associate":
            continue
        loc = ap_locs.get(e.ap_id)
        if loc is None:
            diag.unlocalized_ap_points += 1
            continue
        points.append((e.timestamp, 1, loc.latitude, loc.longitude, SOURCE_WIFI, e.ap_id))
    points.sort(key=lambda p: (p[0], p[1], p[5]))

    merged = []
    for p in points:
        if merged and merged[-1][0] == p[0]:
            diag.timestamp_ties += 1
            continue
        merged.append(p)
    if not merged:
        return []

    t = np.array([p[0] for p in merged])
    is_wifi = np.array([p[4] == SOURCE_WIFI for p in merged])
    _, hour, weekday = local_calendar(t, tz)
    daytime = (hour >= policy.day_start_hour) & (hour < policy.day_end_hour)
    weekend = weekday >= 5
    t_wifi = np.where(daytime, np.where(weekend, policy.t_wifi_weekend_day,
                                        policy.t_wifi_weekday_day), policy.t_wifi_night)
    if platform == "android":
        hold = np.where(is_wifi, t_wifi, policy.t_gps_android)
    elif platform == "ios":
        hold = t_wifi
    else:
        raise ValueError(f"unknown platform {platform!r}")

    end = t + hold
    end[:-1] = np.minimum(end[:-1], t[1:])

    dissoc = _next_dissociate(events)
    windows = []
    for i, p in enumerate(merged):
        stop = end[i]
        if p[4] == SOURCE_WIFI and p[5] in dissoc:
            times = dissoc[p[5]]
            k = np.searchsorted(times, p[0], side="right")
            if k < times.size and times[k] < stop:
                stop = times[k]
                diag.dissociate_clips += 1
        if stop <= p[0]:
            diag.zero_length_points += 1
            continue
        windows.append(ValidityWindow(float(p[0]), float(stop), p[2], p[3], p[4]))
    return windows


def resample_minute_grid(windows: Sequence[ValidityWindow], user_id: str = "",
                         tz: str = "UTC") -> MinuteTrack:
    """One point per whole-minute boundary ``m`` with ``start <= m < end``."""
    if not windows:
        return MinuteTrack.empty(user_id, tz)
    start = np.array([w.start for w in windows])
    stop = np.array([w.end for w in windows])
    first = (np.ceil(start / MINUTE) * MINUTE).astype(np.int64)
    last_excl = (np.ceil(stop / MINUTE) * MINUTE).astype(np.int64)
    counts = np.maximum((last_excl - first) // MINUTE, 0)
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(windows)), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    minutes = first[owner] + offsets * MINUTE
    lat = np.array([w.latitude for w in windows])[owner]
    lon = np.array([w.longitude for w in windows])[owner]
    src = np.array([w.source for w in windows], dtype="<U4")[owner]
    return MinuteTrack(user_id, minutes, lat, lon, src, tz)


@dataclass
class FusionResult:
    track: MinuteTrack
    windows: list[ValidityWindow]
    access_points: dict[str, ApLocation]
    diagnostics: FusionDiagnostics


def fuse_user(user_id: str, gps: Sequence[LocationSample], events: Sequence[WifiEvent],
              platform: str, tz: str = "UTC",
              policy: FusionPolicy = FusionPolicy()) -> FusionResult:
    """Run AP localization, window construction, and resampling for one user."""
    diag = FusionDiagnostics()
    aps = localize_access_points(gps, events, policy)
    windows = build_validity_windows(gps, aps, events, platform, policy, tz, diag)
    track = resample_minute_grid(windows, user_id, tz)
    if diag.timestamp_ties or diag.unlocalized_ap_points:
        logger.debug("%s: %s", user_id, diag)
    return FusionResult(track, windows, aps, diag)
