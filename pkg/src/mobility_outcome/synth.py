"""Synthetic cohorts with Android-like and iOS-like location sampling.

Each user lives a place-routine life (home, maybe work, a few errand
places) whose daily activity level falls as latent depression severity
rises.  The latent severity follows a per-user trajectory: responders
improve over the weeks, non-responders drift.  Weekly questionnaire scores
and monthly clinician ratings are derived from it.

Android users are sampled on a 10-minute clock.  iOS users emit a fix only
after moving further than a speed-dependent trigger distance (50 m when
walking, up to one mile when driving).  Both platforms see WiFi
associations at home and work.  iOS behaviour is additionally passed
through an affine distortion of the activity level, which gives the two
platforms differently shaped feature distributions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from datetime import date, datetime, time, timedelta
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np

from .ingest import (CgiRecord, LocationSample, QidsRecord, RawCohort, WifiEvent,
                     assemble_cohort, write_cohort)

KM_PER_DEG_LAT = 111.195
MILE_M = 1609.0


@dataclass(frozen=True)
class CohortSpec:
    # unequal platform sizes; the smaller Android side keeps the undistorted activity
    n_android: int = 14
    n_ios: int = 30
    n_weeks: int = 8
    cgi_every_days: int = 28
    start_date: date = date(2023, 1, 2)
    enrollment_spread_days: int = 14
    timezone: str = "America/New_York"
    center: tuple[float, float] = (41.808, -72.253)
    city_radius_km: float = 8.0
    places_per_user: tuple[int, int] = (5, 9)   # home + work + errands, inclusive range
    employed_prob: float = 0.7

    # latent severity
    baseline_range: tuple[float, float] = (11.0, 24.0)
    responder_prob: float = 0.45
    responder_weekly_drop: tuple[float, float] = (0.8, 1.6)
    nonresponder_weekly_drift: tuple[float, float] = (-0.3, 0.3)
    latent_noise_sd: float = 0.7
    qids_noise_sd: float = 1.5
    improvement_threshold: float = 5.0

    # severity -> activity in [0, 1]; activity drives outings and errand variety
    activity_intercept: float = 1.4
    activity_slope: float = 0.06
    activity_day_sd: float = 0.05
    ios_activity_scale: float = 0.5
    ios_activity_offset: float = 0.25

    # sampling
    android_period_s: float = 600.0
    android_jitter_s: float = 15.0
    ios_trigger_walk_m: float = 50.0
    ios_trigger_drive_m: float = MILE_M
    drive_speed_kmh: float = 30.0
    walk_speed_kmh: float = 5.0
    gps_noise_scale: float = 1.0       # multiplies the reported-accuracy noise
    gps_outlier_prob: float = 0.03
    wifi_reconnect_minutes: tuple[float, float] = (60.0, 180.0)
    missing_hour_rate: float = 0.10
    missing_day_rate: float = 0.05

    def validate(self) -> None:
        if self.n_android < 0 or self.n_ios < 0 or self.n_android + self.n_ios == 0:
            raise ValueError("cohort needs at least one user")
        lo, hi = self.places_per_user
        if lo < 1 or hi < lo:
            raise ValueError("each user needs at least one place")
        for name in ("employed_prob", "responder_prob", "gps_outlier_prob",
                     "missing_hour_rate", "missing_day_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("android_period_s", "ios_trigger_walk_m", "ios_trigger_drive_m",
                     "drive_speed_kmh", "walk_speed_kmh", "n_weeks", "cgi_every_days"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.baseline_range[0] < 11 or self.baseline_range[1] > 27:
            raise ValueError("baseline severities must lie in [11, 27]")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "CohortSpec":
        """Build from string values (config files); unknown keys are errors."""
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown cohort spec key {key!r}")
            current = getattr(defaults, key)
            if isinstance(current, tuple):
                kwargs[key] = tuple(type(c)(v) for c, v in zip(current, raw.split(",")))
            elif isinstance(current, date):
                kwargs[key] = date.fromisoformat(raw)
            else:
                kwargs[key] = type(current)(raw)
        return cls(**kwargs)


@dataclass(frozen=True)
class LatentWeek:
    user_id: str
    week: int
    severity: float
    improved: bool


@dataclass
class SyntheticCohort:
    raw: RawCohort
    latent: list[LatentWeek]
    spec: CohortSpec
    homes: dict[str, tuple[float, float]] = field(default_factory=dict)

    def write(self, directory: str | Path) -> Path:
        """Ingest CSVs, a manifest, and ``latent_truth.csv``; returns the manifest path."""
        manifest = write_cohort(self.raw, directory, self.spec.timezone)
        with open(Path(directory) / "latent_truth.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user_id", "week", "severity", "improved"])
            for row in self.latent:
                w.writerow([row.user_id, row.week, f"{row.severity:.4f}", int(row.improved)])
        return manifest


# -- helpers --------------------------------------------------------------------------

def _offset(origin: tuple[float, float], dist_km: float, bearing: float) -> tuple[float, float]:
    lat0, lon0 = origin
    dlat = dist_km * math.cos(bearing) / KM_PER_DEG_LAT
    dlon = dist_km * math.sin(bearing) / (KM_PER_DEG_LAT * math.cos(math.radians(lat0)))
    return lat0 + dlat, lon0 + dlon


def _dist_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    dy = (a[0] - b[0]) * KM_PER_DEG_LAT
    dx = (a[1] - b[1]) * KM_PER_DEG_LAT * math.cos(math.radians(a[0]))
    return math.hypot(dx, dy)


def cgi_from_drop(drop: float, threshold: float) -> int:
    """Clinician rating implied by the fall in latent severity since baseline."""
    if drop >= threshold + 3:
        return 1
    if drop >= threshold:
        return 2
    if drop >= 2:
        return 3
    if drop > -2:
        return 4
    if drop > -4:
        return 5
    return 6


@dataclass
class _User:
    user_id: str
    platform: str
    places: list[tuple[float, float]]   # 0 = home, 1 = work when employed
    employed: bool
    errand_weights: np.ndarray
    enrollment: date
    baseline: float
    weekly_severity: np.ndarray         # index w = severity at day 7w


class _Simulator:
    def __init__(self, spec: CohortSpec, seed: int):
        spec.validate()
        self.spec = spec
        self.seed = seed
        self.tz = ZoneInfo(spec.timezone)

    def rng(self, *stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *stream])

    # -- people ----------------------------------------------------------------
    def make_user(self, index: int, platform: str) -> _User:
        s = self.spec
        rng = self.rng(index, 0)
        uid = f"{'a' if platform == 'android' else 'i'}{index:03d}"
        home = _offset(s.center, s.city_radius_km * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi))
        n_places = int(rng.integers(s.places_per_user[0], s.places_per_user[1] + 1))
        employed = n_places >= 2 and rng.uniform() < s.employed_prob
        places = [home]
        if employed:
            places.append(_offset(home, rng.uniform(2.0, 10.0), rng.uniform(0, 2 * math.pi)))
        while len(places) < n_places:
            places.append(_offset(home, rng.uniform(0.3, 6.0), rng.uniform(0, 2 * math.pi)))
        n_errands = n_places - 1 - int(employed)
        weights = 1.0 / np.arange(1, n_errands + 1) if n_errands else np.empty(0)

        enrollment = s.start_date + timedelta(days=int(rng.integers(0, s.enrollment_spread_days + 1)))
        base = float(rng.uniform(*s.baseline_range))
        responder = rng.uniform() < s.responder_prob
        if responder:
            rate = rng.uniform(*s.responder_weekly_drop)
            onset = int(rng.integers(0, 3))
        else:
            rate = -rng.uniform(*s.nonresponder_weekly_drift)
            onset = 0
        weeks = np.arange(s.n_weeks + 1)
        sev = base - rate * np.maximum(weeks - onset, 0)
        sev[1:] += rng.normal(0.0, s.latent_noise_sd, s.n_weeks)
        sev = np.clip(sev, 0.0, 27.0)
        return _User(uid, platform, places, employed, weights, enrollment, base, sev)

    def activity(self, user: _User, severity: float, rng: np.random.Generator) -> float:
        s = self.spec
        a = s.activity_intercept - s.activity_slope * severity
        a += rng.normal(0.0, s.activity_day_sd)
        a = min(max(a, 0.0), 1.0)
        if user.platform == "ios":
            a = s.ios_activity_offset + s.ios_activity_scale * a
        return min(max(a, 0.0), 1.0)

    # -- daily routine -----------------------------------------------------------
    def day_plan(self, user: _User, day: date, act: float,
                 rng: np.random.Generator) -> list[tuple[int, float, float]]:
        """Outings as (place index, arrive minute, leave minute) after local midnight."""
        weekday = day.weekday() < 5
        plan = []
        cursor = rng.normal(8 * 60, 30)
        end_of_day = rng.normal(22 * 60 + 30, 30)
        if user.employed and weekday and rng.uniform() < 0.3 + 0.65 * act:
            arrive = cursor + rng.uniform(30, 90)
            leave = arrive + rng.uniform(6 * 60, 9 * 60)
            plan.append((1, arrive, leave))
            cursor = leave
        n_err = user.errand_weights.size
        if n_err:
            k_eff = max(1, int(round(act * n_err + 0.2)))
            w = user.errand_weights[:k_eff] / user.errand_weights[:k_eff].sum()
            first_errand = 1 + int(user.employed)
            for _ in range(min(int(rng.poisson(3.2 * act)), 4)):
                start = cursor + rng.uniform(20, 120)
                dur = rng.uniform(40, 150)
                if start + dur > end_of_day:
                    break
                plan.append((first_errand + int(rng.choice(k_eff, p=w)), start, start + dur))
                cursor = start + dur
        return plan

    def render_day(self, user: _User, plan, day_start: int, n_minutes: int):
        """True per-minute position and place index (-1 while travelling)."""
        lat = np.empty(n_minutes)
        lon = np.empty(n_minutes)
        place = np.full(n_minutes, -1, dtype=np.int64)
        home = user.places[0]
        cur = 0
        pos = home
        here = 0
        s = self.spec
        for target, arrive, leave in plan + [(0, None, None)]:
            dest = user.places[target]
            dist = _dist_km(pos, dest)
            speed = s.drive_speed_kmh if dist > 1.5 else s.walk_speed_kmh
            travel = max(1, int(math.ceil(dist / speed * 60)))
            depart = int(arrive) - travel if arrive is not None else None
            if depart is None:
                # head home right after the last outing
                depart = cur
            depart = max(depart, cur)
            depart = min(depart, n_minutes)
            lat[cur:depart], lon[cur:depart] = pos
            place[cur:depart] = here
            t_end = min(depart + travel, n_minutes)
            if t_end > depart:
                f = (np.arange(depart, t_end) - depart + 1) / travel
                lat[depart:t_end] = pos[0] + f * (dest[0] - pos[0])
                lon[depart:t_end] = pos[1] + f * (dest[1] - pos[1])
            cur = t_end
            pos, here = dest, target
            if leave is not None:
                stop = min(int(leave), n_minutes)
                if stop > cur:
                    lat[cur:stop], lon[cur:stop] = pos
                    place[cur:stop] = here
                    cur = stop
        lat[cur:], lon[cur:] = pos
        place[cur:] = here
        return lat, lon, place

    def local_midnight(self, day: date) -> int:
        return int(datetime.combine(day, time(0), self.tz).timestamp())

    def severity_on(self, user: _User, offset_days: float) -> float:
        weeks = np.arange(user.weekly_severity.size) * 7.0
        return float(np.interp(offset_days, weeks, user.weekly_severity))

    def trajectory(self, user: _User, index: int):
        s = self.spec
        n_days = 7 * s.n_weeks + 1
        rng = self.rng(index, 1)
        chunks_t, chunks_lat, chunks_lon, chunks_place = [], [], [], []
        for d in range(n_days):
            day = user.enrollment + timedelta(days=d)
            start = self.local_midnight(day)
            n_min = (self.local_midnight(day + timedelta(days=1)) - start) // 60
            act = self.activity(user, self.severity_on(user, d), rng)
            plan = self.day_plan(user, day, act, rng)
            lat, lon, place = self.render_day(user, plan, start, n_min)
            chunks_t.append(start + 60 * np.arange(n_min, dtype=np.int64))
            chunks_lat.append(lat)
            chunks_lon.append(lon)
            chunks_place.append(place)
        return (np.concatenate(chunks_t), np.concatenate(chunks_lat),
                np.concatenate(chunks_lon), np.concatenate(chunks_place))

    # -- sensing -----------------------------------------------------------------
    def _fix(self, rng, lat, lon, accuracy):
        s = self.spec
        if rng.uniform() < s.gps_outlier_prob:
            accuracy = rng.uniform(170.0, 800.0)
        sd_m = s.gps_noise_scale * accuracy / 2.0
        dlat = rng.normal(0.0, sd_m) / 1000.0 / KM_PER_DEG_LAT if sd_m else 0.0
        dlon = (rng.normal(0.0, sd_m) / 1000.0 / (KM_PER_DEG_LAT * math.cos(math.radians(lat)))
                if sd_m else 0.0)
        return float(lat + dlat), float(lon + dlon), round(float(accuracy), 1)

    def sample_android(self, user, t, lat, lon, rng):
        s = self.spec
        out = []
        times = np.arange(t[0], t[-1], s.android_period_s)
        jitter = rng.uniform(-s.android_jitter_s, s.android_jitter_s, times.size) if s.android_jitter_s else 0
        times = np.round(times + jitter).astype(np.int64)
        idx = np.clip((times - t[0]) // 60, 0, t.size - 1)
        for ts, k in zip(times, idx):
            acc = float(np.clip(rng.lognormal(math.log(12.0), 0.4), 4.0, 60.0))
            la, lo, acc = self._fix(rng, lat[k], lon[k], acc)
            out.append(LocationSample(user.user_id, float(ts), la, lo, acc))
        return out

    def sample_ios(self, user, t, lat, lon, place, rng):
        s = self.spec
        out = []
        last = None
        prev_moving = False
        for k in range(t.size):
            if last is not None and k > 0 and lat[k] == lat[k - 1] and lon[k] == lon[k - 1] \
                    and not prev_moving:
                continue
            moving = place[k] < 0
            here = (lat[k], lon[k])
            if last is None:
                trigger = 0.0
            else:
                step_km = _dist_km((lat[k - 1], lon[k - 1]), here) if k else 0.0
                trigger = s.ios_trigger_drive_m if step_km * 60 > 15.0 else s.ios_trigger_walk_m
            prev_moving = moving
            if last is not None and _dist_km(last, here) * 1000.0 < trigger:
                continue
            acc = 100.0 if moving else 10.0
            acc = float(np.clip(rng.normal(acc, acc * 0.2), 3.0, 165.0))
            la, lo, acc = self._fix(rng, lat[k], lon[k], acc)
            ts = int(t[k]) + int(rng.integers(0, 30))
            out.append(LocationSample(user.user_id, float(ts), la, lo, acc))
            last = here
        return out

    def wifi_events(self, user, t, place, rng):
        s = self.spec
        aps = {0: f"{user.user_id}-home"}
        if user.employed:
            aps[1] = f"{user.user_id}-work"
        events = []
        # runs of constant place index
        change = np.flatnonzero(np.diff(place) != 0) + 1
        starts = np.concatenate([[0], change])
        stops = np.concatenate([change, [place.size]])
        for a, b in zip(starts, stops):
            p = int(place[a])
            if p not in aps:
                continue
            ap = aps[p]
            cur = int(t[a]) + int(rng.integers(0, 120))
            end = int(t[b - 1]) + 60
            while cur < end:
                events.append(WifiEvent(user.user_id, float(cur), ap, "associate"))
                nxt = cur + int(60 * rng.uniform(*s.wifi_reconnect_minutes))
                stop = min(nxt, end)
                events.append(WifiEvent(user.user_id, float(stop), ap, "dissociate"))
                cur = stop + int(rng.integers(5, 60))
        return events

    def outage_mask(self, user, times: np.ndarray, rng) -> np.ndarray:
        """True where a timestamp falls in a dropped hour or day."""
        s = self.spec
        if times.size == 0:
            return np.zeros(0, dtype=bool)
        t0 = self.local_midnight(user.enrollment)
        hours = ((times - t0) // 3600).astype(np.int64)
        n_hours = int(hours.max()) + 1
        drop_h = rng.uniform(size=n_hours) < s.missing_hour_rate
        drop_d = rng.uniform(size=n_hours // 24 + 1) < s.missing_day_rate
        h = np.clip(hours, 0, n_hours - 1)
        return drop_h[h] | drop_d[h // 24]

    # -- labels ------------------------------------------------------------------
    def questionnaires(self, user: _User, rng):
        s = self.spec
        qids = [QidsRecord(user.user_id, user.enrollment, int(max(11, round(user.baseline))), True)]
        latent = []
        for w in range(1, s.n_weeks + 1):
            sev = float(user.weekly_severity[w])
            score = int(np.clip(round(sev + rng.normal(0.0, s.qids_noise_sd)), 0, 27))
            qids.append(QidsRecord(user.user_id, user.enrollment + timedelta(days=7 * w), score, False))
            latent.append(LatentWeek(user.user_id, w, sev,
                                     user.baseline - sev >= s.improvement_threshold))
        cgi = []
        for day in range(s.cgi_every_days, 7 * s.n_weeks + 1, s.cgi_every_days):
            drop = user.baseline - self.severity_on(user, day)
            cgi.append(CgiRecord(user.user_id, user.enrollment + timedelta(days=day),
                                 cgi_from_drop(drop, s.improvement_threshold)))
        return qids, cgi, latent


def _repair_alternation(events: list[WifiEvent]) -> list[WifiEvent]:
    out = []
    last: dict[str, str] = {}
    for e in sorted(events, key=lambda e: e.timestamp):
        if last.get(e.ap_id, "dissociate") == e.kind:
            continue
        last[e.ap_id] = e.kind
        out.append(e)
    return out


def generate_cohort(spec: CohortSpec = CohortSpec(), seed: int = 0) -> SyntheticCohort:
    """Deterministic synthetic cohort for ``(spec, seed)``."""
    sim = _Simulator(spec, seed)
    platforms, timezones = {}, {}
    locations, wifi, qids, cgi, latent = [], [], [], [], []
    homes = {}
    roster = [("android", k) for k in range(spec.n_android)] + \
             [("ios", spec.n_android + k) for k in range(spec.n_ios)]
    for platform, index in roster:
        user = sim.make_user(index, platform)
        platforms[user.user_id] = platform
        timezones[user.user_id] = spec.timezone
        homes[user.user_id] = user.places[0]
        t, lat, lon, place = sim.trajectory(user, index)
        rng = sim.rng(index, 2)
        if platform == "android":
            samples = sim.sample_android(user, t, lat, lon, rng)
        else:
            samples = sim.sample_ios(user, t, lat, lon, place, rng)
        events = sim.wifi_events(user, t, place, rng)
        out_rng = sim.rng(index, 3)
        keep_s = ~sim.outage_mask(user, np.array([x.timestamp for x in samples]), out_rng)
        out_rng = sim.rng(index, 3)
        keep_e = ~sim.outage_mask(user, np.array([x.timestamp for x in events]), out_rng)
        locations += [x for x, k in zip(samples, keep_s) if k]
        wifi += _repair_alternation([x for x, k in zip(events, keep_e) if k])
        q, c, lat_rows = sim.questionnaires(user, sim.rng(index, 4))
        qids += q
        cgi += c
        latent += lat_rows
    raw = assemble_cohort(platforms, timezones, locations, wifi, qids, cgi)
    return SyntheticCohort(raw, latent, spec, homes)
