"""Mobility features computed from a one-minute location track."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import astuple, dataclass, field, fields
from datetime import date, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .diagnostics import ExclusionLog
from .fusion import MinuteTrack
from .intervals import INTERVAL_DAYS, Label, QidsInterval

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
MOVING_SPEED_KMH = 1.0
DBSCAN_EPS_M = 20.0
DBSCAN_MIN_PTS = 160
VARIANCE_FLOOR = 1e-12
NIGHT_END_HOUR = 6

FEATURE_NAMES = (
    "location_variance",
    "time_moving_frac",
    "total_distance_norm",
    "avg_moving_speed",
    "n_unique_locations",
    "entropy",
    "normalized_entropy",
    "time_home_frac",
)


@dataclass(frozen=True)
class FeatureParams:
    eps_m: float = DBSCAN_EPS_M
    min_pts: int = DBSCAN_MIN_PTS
    moving_speed_kmh: float = MOVING_SPEED_KMH
    variance_floor: float = VARIANCE_FLOOR


@dataclass(frozen=True, slots=True)
class FeatureVector:
    location_variance: float
    time_moving_frac: float
    total_distance_norm: float
    avg_moving_speed: float
    n_unique_locations: int
    entropy: float
    normalized_entropy: float
    time_home_frac: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "FeatureVector":
        values = list(values)
        values[4] = int(round(values[4]))
        return cls(*values)


@dataclass(frozen=True)
class StayCluster:
    cluster_id: int
    members: np.ndarray
    centroid: tuple[float, float]
    dwell_minutes: int


# -- geometry ------------------------------------------------------------------

def haversine_km(a, b) -> np.ndarray | float:
    """Great-circle distance in km between ``(lat, lon)`` pairs in degrees.

    Broadcasts: ``a`` and ``b`` may be ``(..., 2)`` arrays.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = _haversine(a[..., 0], a[..., 1], b[..., 0], b[..., 1])
    return float(d) if np.ndim(d) == 0 else d


def _haversine(lat1, lon1, lat2, lon2):
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def segment_lengths_km(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    return _haversine(lat[:-1], lon[:-1], lat[1:], lon[1:])


def classify_motion(minutes: np.ndarray, lat: np.ndarray, lon: np.ndarray,
                    threshold_kmh: float = MOVING_SPEED_KMH) -> tuple[np.ndarray, np.ndarray]:
    """Per-point outgoing speed (km/h) and moving flag.

    A point moves iff its outgoing speed is strictly above the threshold;
    the last point takes the flag and speed of the segment before it.
    """
    n = len(minutes)
    if n < 2:
        return np.zeros(n), np.zeros(n, dtype=bool)
    hours = np.diff(np.asarray(minutes, dtype=float)) / 3600.0
    dist = segment_lengths_km(np.asarray(lat, float), np.asarray(lon, float))
    seg_speed = np.divide(dist, hours, out=np.zeros_like(dist), where=hours > 0)
    speed = np.append(seg_speed, seg_speed[-1])
    return speed, speed > threshold_kmh


# -- density clustering ----------------------------------------------------------

def _unit_xyz(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    phi = np.radians(lat)
    lmb = np.radians(lon)
    return np.column_stack([np.cos(phi) * np.cos(lmb), np.cos(phi) * np.sin(lmb), np.sin(phi)])


def dbscan_labels(points: np.ndarray, eps_m: float = DBSCAN_EPS_M,
                  min_pts: int = DBSCAN_MIN_PTS) -> np.ndarray:
    """DBSCAN over ``(lat, lon)`` rows with haversine distance.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps_m``.  Clusters are connected components of core points;
    a border point joins the cluster of its nearest core neighbour (ties by
    the neighbour's (lat, lon)), which keeps the result independent of
    input order.  Labels are numbered by each cluster's smallest (lat, lon)
    member; noise is -1.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n < min_pts or n == 0:
        return labels

    # identical coordinates share a neighbourhood; work on unique rows
    uniq, inverse, weight = np.unique(pts, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    u = len(uniq)
    eps_km = eps_m / 1000.0
    chord = 2.0 * math.sin(eps_km / (2.0 * EARTH_RADIUS_KM)) * (1.0 + 1e-9) + 1e-15
    tree = cKDTree(_unit_xyz(uniq[:, 0], uniq[:, 1]))
    pairs = tree.query_pairs(chord, output_type="ndarray")
    if len(pairs):
        d = _haversine(uniq[pairs[:, 0], 0], uniq[pairs[:, 0], 1],
                       uniq[pairs[:, 1], 0], uniq[pairs[:, 1], 1])
        keep = d <= eps_km
        pairs, d = pairs[keep], d[keep]
    else:
        d = np.empty(0)

    density = weight.astype(np.int64).copy()
    np.add.at(density, pairs[:, 0], weight[pairs[:, 1]])
    np.add.at(density, pairs[:, 1], weight[pairs[:, 0]])
    core = density >= min_pts
    if not core.any():
        return labels

    both = core[pairs[:, 0]] & core[pairs[:, 1]]
    cp = pairs[both]
    graph = coo_matrix((np.ones(len(cp)), (cp[:, 0], cp[:, 1])), shape=(u, u))
    _, comp = connected_components(graph, directed=False)

    ulabel = np.full(u, -1, dtype=np.int64)
    ulabel[core] = comp[core]

    # border assignment: nearest core neighbour, ties by neighbour coordinates
    # (uniq is lexicographically sorted, so the row index orders coordinates)
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    dd = np.concatenate([d, d])
    sel = ~core[src] & core[dst]
    if sel.any():
        src, dst, dd = src[sel], dst[sel], dd[sel]
        order = np.lexsort((dst, dd, src))
        src, dst = src[order], dst[order]
        first = np.ones(src.size, dtype=bool)
        first[1:] = src[1:] != src[:-1]
        ulabel[src[first]] = ulabel[dst[first]]

    # canonical numbering by each cluster's first row in sorted order
    assigned = np.flatnonzero(ulabel >= 0)
    _, first_row = np.unique(ulabel[assigned], return_index=True)
    ordered = ulabel[assigned][np.sort(first_row)]
    remap = np.full(ulabel.max() + 1, -1, dtype=np.int64)
    remap[ordered] = np.arange(ordered.size)
    canon = np.where(ulabel >= 0, remap[np.maximum(ulabel, 0)], -1)
    return canon[inverse]


def cluster_stationary(points: np.ndarray, eps_m: float = DBSCAN_EPS_M,
                       min_pts: int = DBSCAN_MIN_PTS) -> list[StayCluster]:
    """Stay clusters among stationary ``(lat, lon)`` points (one point = one minute)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    labels = dbscan_labels(pts, eps_m, min_pts)
    clusters = []
    for cid in range(labels.max() + 1 if labels.size else 0):
        members = np.flatnonzero(labels == cid)
        centroid = tuple(float(v) for v in pts[members].mean(axis=0))
        clusters.append(StayCluster(cid, members, centroid, int(members.size)))
    return clusters


# -- features -------------------------------------------------------------------

def entropy_of(dwell: Sequence[float]) -> tuple[float, float]:
    """Entropy (nats) of dwell shares and its normalized form."""
    w = np.asarray(dwell, dtype=float)
    w = w[w > 0]
    if w.size == 0:
        return 0.0, 0.0
    p = w / w.sum()
    ent = float(-(p * np.log(p)).sum())
    ent = max(ent, 0.0)
    if w.size <= 1:
        return ent, 0.0
    return ent, float(min(ent / math.log(w.size), 1.0))


def track_features(track: MinuteTrack, days_with_data: int | None = None,
                   home: tuple[float, float] | None = None,
                   params: FeatureParams = FeatureParams(),
                   notes: list[str] | None = None) -> FeatureVector:
    """The eight features for an arbitrary (non-empty) track slice."""
    n = len(track)
    if n == 0:
        raise ValueError("empty track")
    days = track.days_with_data if days_with_data is None else days_with_data
    lat, lon = track.latitude, track.longitude

    spread = float(np.var(lon) + np.var(lat))
    location_variance = math.log(max(spread, params.variance_floor))

    speed, moving = classify_motion(track.minutes, lat, lon, params.moving_speed_kmh)
    time_moving = float(moving.mean())
    seg_dist = segment_lengths_km(lat, lon)
    total_distance = float(seg_dist.sum()) / days if days > 0 else 0.0
    seg_speed = speed[:-1]
    moving_seg = seg_speed > params.moving_speed_kmh
    avg_speed = float(seg_speed[moving_seg].mean()) if moving_seg.any() else 0.0

    still = np.flatnonzero(~moving)
    labels = np.full(n, -1, dtype=np.int64)
    if still.size:
        labels[still] = dbscan_labels(np.column_stack([lat[still], lon[still]]),
                                      params.eps_m, params.min_pts)
    n_clusters = int(labels.max() + 1)
    dwell = np.bincount(labels[labels >= 0], minlength=n_clusters)
    ent, norm_ent = entropy_of(dwell)

    home_cluster = -1
    if n_clusters:
        if home is None:
            night = np.bincount(labels[(labels >= 0) & (track.local_hour < NIGHT_END_HOUR)],
                                minlength=n_clusters)
            if night.max() > 0:
                home_cluster = int(np.argmax(night))
        else:
            members = np.flatnonzero(labels >= 0)
            d = _haversine(lat[members], lon[members], home[0], home[1])
            k = int(np.argmin(d))
            if d[k] * 1000.0 <= params.eps_m:
                home_cluster = int(labels[members[k]])
    if home_cluster < 0:
        if notes is not None:
            notes.append("no_home_cluster")
        time_home = 0.0
    else:
        time_home = float(dwell[home_cluster]) / n

    return FeatureVector(location_variance, time_moving, total_distance, avg_speed,
                         n_clusters, ent, norm_ent, time_home)


def extract_features(interval: QidsInterval, home: tuple[float, float] | None = None,
                     params: FeatureParams = FeatureParams(),
                     notes: list[str] | None = None) -> FeatureVector:
    return track_features(interval.track_slice, interval.days_with_data, home, params, notes)


@dataclass(frozen=True)
class BaselineBundle:
    user_id: str
    location_baseline: FeatureVector | None
    qids_baseline: int
    missing_reason: str | None = None


def extract_baseline(track: MinuteTrack, enrollment_day: date, qids_baseline: int,
                     params: FeatureParams = FeatureParams()) -> BaselineBundle:
    """Features over the first week after enrollment, plus the baseline score."""
    week = track.between_days(enrollment_day, enrollment_day + timedelta(days=INTERVAL_DAYS - 1))
    if len(week) == 0:
        return BaselineBundle(track.user_id, None, qids_baseline, "no_first_week_data")
    return BaselineBundle(track.user_id, track_features(week, params=params), qids_baseline)


# -- feature table ------------------------------------------------------------------

LOCATION_COLUMNS = tuple(f"f{k}" for k in range(1, 9))
BASELINE_COLUMNS = tuple(f"b{k}" for k in range(1, 9))
FEATURE_CSV_COLUMNS = (("user_id", "end_date", "label") + LOCATION_COLUMNS + BASELINE_COLUMNS
                       + ("qids", "qids_baseline", "platform"))


@dataclass
class FeatureTable:
    """One row per labeled interval.

    ``label`` is 1 for improved, 0 otherwise.  ``baseline`` rows are NaN
    for users without first-week data.
    """

    user_ids: np.ndarray
    platforms: np.ndarray
    end_dates: np.ndarray
    labels: np.ndarray
    location: np.ndarray
    baseline: np.ndarray
    qids: np.ndarray
    qids_baseline: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def users(self) -> list[str]:
        return sorted(set(self.user_ids.tolist()))

    def subset(self, mask: np.ndarray) -> "FeatureTable":
        return FeatureTable(*(getattr(self, f.name)[mask] for f in fields(self)))

    @classmethod
    def from_rows(cls, rows: Sequence[dict]) -> "FeatureTable":
        nanrow = [math.nan] * 8
        return cls(
            user_ids=np.array([r["user_id"] for r in rows], dtype=object),
            platforms=np.array([r["platform"] for r in rows], dtype=object),
            end_dates=np.array([str(r["end_date"]) for r in rows], dtype=object),
            labels=np.array([int(r["label"]) for r in rows], dtype=np.int64),
            location=np.array([list(r["location"]) for r in rows], dtype=float).reshape(-1, 8),
            baseline=np.array([list(r["baseline"]) if r["baseline"] is not None else nanrow
                               for r in rows], dtype=float).reshape(-1, 8),
            qids=np.array([r["qids"] for r in rows], dtype=float),
            qids_baseline=np.array([r["qids_baseline"] for r in rows], dtype=float),
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(FEATURE_CSV_COLUMNS)
            for k in range(len(self)):
                label = Label.IMPROVED.value if self.labels[k] else Label.NOT_IMPROVED.value
                writer.writerow([self.user_ids[k], self.end_dates[k], label,
                                 *(repr(float(v)) for v in self.location[k]),
                                 *(repr(float(v)) for v in self.baseline[k]),
                                 int(self.qids[k]), int(self.qids_baseline[k]), self.platforms[k]])

    @classmethod
    def from_csv(cls, path: str | Path) -> "FeatureTable":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != FEATURE_CSV_COLUMNS:
                raise ValueError(f"{path}: unexpected feature columns")
            for r in reader:
                base = [float(r[c]) for c in BASELINE_COLUMNS]
                rows.append({
                    "user_id": r["user_id"], "platform": r["platform"], "end_date": r["end_date"],
                    "label": r["label"] == Label.IMPROVED.value,
                    "location": [float(r[c]) for c in LOCATION_COLUMNS],
                    "baseline": None if all(math.isnan(v) for v in base) else base,
                    "qids": int(r["qids"]), "qids_baseline": int(r["qids_baseline"]),
                })
        return cls.from_rows(rows)
