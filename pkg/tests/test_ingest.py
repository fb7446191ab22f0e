from __future__ import annotations

from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobility_outcome.ingest import (CgiRecord, CohortLoadError, LocationSample, QidsRecord,
                                     WifiEvent, assemble_cohort, filter_gps_accuracy, load_cohort,
                                     write_cohort)


def write_files(tmp_path, locations, wifi=(), qids=(), cgi=(), platforms=None):
    platforms = platforms or [("u1", "android", "UTC"), ("u2", "ios", "UTC")]
    files = {
        "locations.csv": ["user_id,timestamp,lat,lon,accuracy_m"] + [",".join(map(str, r)) for r in locations],
        "wifi.csv": ["user_id,timestamp,ap_id,kind"] + [",".join(map(str, r)) for r in wifi],
        "qids.csv": ["user_id,date,score,is_baseline"] + [",".join(map(str, r)) for r in qids],
        "cgi.csv": ["user_id,date,cgi_i"] + [",".join(map(str, r)) for r in cgi],
        "platforms.csv": ["user_id,platform,timezone"] + [",".join(r) for r in platforms],
    }
    for name, lines in files.items():
        (tmp_path / name).write_text("\n".join(lines) + "\n")
    manifest = tmp_path / "manifest.txt"
    manifest.write_text("".join(f"{k} = {k}.csv\n" for k in ("locations", "wifi", "qids", "cgi", "platforms")))
    return manifest


class TestLoadCohort:
    def test_two_users_ten_rows(self, tmp_path):
        rows = [(u, 1000 + 60 * k, 41.0 + k * 1e-4, -72.0, 10) for u in ("u1", "u2") for k in range(10)]
        cohort = load_cohort(write_files(tmp_path, rows))
        assert cohort.users == ["u1", "u2"]
        assert cohort.n_samples() == 20
        assert cohort.rejections == []

    def test_latitude_out_of_range_rejected(self, tmp_path):
        rows = [("u1", 1000, 41.0, -72.0, 10), ("u1", 1060, 91.0, -72.0, 10)]
        cohort = load_cohort(write_files(tmp_path, rows))
        assert cohort.n_samples() == 1
        assert [r.reason for r in cohort.rejections] == ["latitude out of range"]
        assert cohort.rejections[0].line == 3

    @pytest.mark.parametrize("row, reason", [
        (("u1", 1000, 41.0, 181.0, 10), "longitude out of range"),
        (("u1", "nan", 41.0, -72.0, 10), "timestamp"),
        (("u1", 1000, 41.0, -72.0, -1), "negative accuracy"),
        (("u1", 1000, "abc", -72.0, 10), "latitude"),
    ])
    def test_malformed_rows_collected(self, tmp_path, row, reason):
        cohort = load_cohort(write_files(tmp_path, [row]))
        assert cohort.n_samples() == 0
        assert reason in cohort.rejections[0].reason

    def test_wrong_field_count(self, tmp_path):
        manifest = write_files(tmp_path, [("u1", 1000, 41.0, -72.0, 10)])
        with open(tmp_path / "locations.csv", "a") as fh:
            fh.write("u1,2000,41.0\n")
        cohort = load_cohort(manifest)
        assert cohort.n_samples() == 1
        assert cohort.rejections[0].reason == "wrong field count"

    def test_exact_duplicates_collapse(self, tmp_path):
        rows = [("u1", 1000, 41.0, -72.0, 10), ("u1", 1000, 41.0, -72.0, 12),
                ("u1", 1060, 41.0, -72.0, 10), ("u1", 1000, 41.0, -72.0, 10)]
        cohort = load_cohort(write_files(tmp_path, rows))
        got = {(s.user_id, s.timestamp, s.latitude, s.longitude) for s in cohort.locations["u1"]}
        oracle = {(u, float(t), la, lo) for u, t, la, lo, _ in rows}
        assert got == oracle
        # the first occurrence in file order survives
        assert cohort.locations["u1"][0].accuracy_m == 10
        assert cohort.duplicates["locations"] == 2

    def test_conflicting_fix_at_same_time_rejected(self, tmp_path):
        rows = [("u1", 1000, 41.0, -72.0, 10), ("u1", 1000, 41.5, -72.0, 10)]
        cohort = load_cohort(write_files(tmp_path, rows))
        assert len(cohort.locations["u1"]) == 1
        assert "same timestamp" in cohort.rejections[0].reason

    def test_records_sorted_per_user(self, tmp_path):
        rows = [("u1", t, 41.0, -72.0 + t * 1e-6, 10) for t in (3000, 1000, 2000)]
        cohort = load_cohort(write_files(tmp_path, rows))
        ts = [s.timestamp for s in cohort.locations["u1"]]
        assert ts == sorted(ts)
        assert np.all(np.diff(ts) > 0)

    def test_missing_file_is_fatal(self, tmp_path):
        manifest = write_files(tmp_path, [])
        (tmp_path / "wifi.csv").unlink()
        with pytest.raises(CohortLoadError, match="wifi"):
            load_cohort(manifest)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CohortLoadError, match="manifest not found"):
            load_cohort(tmp_path / "nope.txt")

    def test_untagged_user_is_fatal(self, tmp_path):
        rows = [("u3", 1000, 41.0, -72.0, 10)]
        with pytest.raises(CohortLoadError, match="u3"):
            load_cohort(write_files(tmp_path, rows))

    def test_wifi_alternation_enforced(self, tmp_path):
        wifi = [("u1", 100, "ap", "associate"), ("u1", 200, "ap", "associate"),
                ("u1", 300, "ap", "dissociate")]
        cohort = load_cohort(write_files(tmp_path, [], wifi=wifi))
        assert [e.kind for e in cohort.wifi["u1"]] == ["associate", "dissociate"]
        assert len(cohort.rejections) == 1

    def test_qids_rules(self, tmp_path):
        qids = [("u1", "2023-01-02", 15, 1), ("u1", "2023-01-09", 14, 0),
                ("u1", "2023-01-03", 12, 1), ("u2", "2023-01-02", 9, 1), ("u2", "2023-01-09", 28, 0)]
        cohort = load_cohort(write_files(tmp_path, [], qids=qids))
        assert cohort.baseline("u1").score == 15
        assert cohort.enrollment_day("u1") == date(2023, 1, 2)
        assert cohort.baseline("u2") is None
        reasons = sorted(r.reason for r in cohort.rejections)
        assert reasons == ["baseline score below enrollment cutoff", "qids score out of range",
                           "second baseline record"]

    def test_cgi_range(self, tmp_path):
        cgi = [("u1", "2023-02-01", 2), ("u1", "2023-03-01", 8)]
        cohort = load_cohort(write_files(tmp_path, [], cgi=cgi))
        assert [c.cgi_i for c in cohort.cgi["u1"]] == [2]
        assert cohort.rejections[0].reason == "cgi_i out of range"

    def test_timezone_from_manifest(self, tmp_path):
        manifest = write_files(tmp_path, [], platforms=[("u1", "android", ""), ("u2", "ios", "Asia/Tokyo")])
        with open(manifest, "a") as fh:
            fh.write("timezone = America/Chicago\n")
        cohort = load_cohort(manifest)
        assert cohort.timezones == {"u1": "America/Chicago", "u2": "Asia/Tokyo"}


class TestRoundTrip:
    def test_load_write_load_identical(self, tmp_path):
        locs = [LocationSample("a", 1000.0 + 60 * k, 41.0 + 1e-5 * k, -72.25, 8.5) for k in range(5)]
        wifi = [WifiEvent("a", 1010.0, "ap1", "associate"), WifiEvent("a", 1500.0, "ap1", "dissociate")]
        qids = [QidsRecord("a", date(2023, 1, 2), 14, True), QidsRecord("a", date(2023, 1, 9), 12, False)]
        cgi = [CgiRecord("a", date(2023, 1, 30), 2)]
        first = assemble_cohort({"a": "ios"}, {"a": "UTC"}, locs, wifi, qids, cgi)
        m1 = write_cohort(first, tmp_path / "one")
        second = load_cohort(m1)
        m2 = write_cohort(second, tmp_path / "two")
        third = load_cohort(m2)
        for attr in ("platforms", "timezones", "locations", "wifi", "qids", "cgi"):
            assert getattr(second, attr) == getattr(first, attr)
            assert getattr(third, attr) == getattr(second, attr)
        for name in ("locations.csv", "wifi.csv", "qids.csv", "cgi.csv", "platforms.csv"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


class TestAccuracyFilter:
    @staticmethod
    def _samples(acc):
        return [LocationSample("u", float(k), 0.0, 0.0, float(a)) for k, a in enumerate(acc)]

    def test_boundary_kept(self):
        kept = filter_gps_accuracy(self._samples([10, 165, 166]))
        assert [s.accuracy_m for s in kept] == [10, 165]

    def test_empty(self):
        assert filter_gps_accuracy([]) == []

    def test_matches_brute_force_count(self):
        acc = np.random.default_rng(3).uniform(0, 300, 1000)
        kept = filter_gps_accuracy(self._samples(acc))
        assert len(kept) == sum(1 for a in acc if a <= 165)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 400, allow_nan=False), max_size=50), st.floats(1, 300))
    def test_idempotent_and_order_preserving(self, acc, limit):
        s = self._samples(acc)
        once = filter_gps_accuracy(s, limit)
        assert filter_gps_accuracy(once, limit) == once
        ts = [x.timestamp for x in once]
        assert ts == sorted(ts)
