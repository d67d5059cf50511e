"""Trip parsing, feature extraction, event detection, and library persistence."""

import csv
import io
import json
import math
from datetime import datetime, timezone

import numpy as np
import pytest
import scipy.stats as sstats

from regime_dispatch.geo import BoundingBox
from regime_dispatch.ingestion import (
    CSV_COLUMNS,
    BlockMeta,
    IngestConfig,
    LibraryFormatError,
    RegimeBlock,
    RegimeLibrary,
    SummaryFeatures,
    SurgeEvent,
    TripRecord,
    compute_features,
    detect_events,
    load_library,
    parse_trips,
    save_library,
    segment_blocks,
)

from conftest import make_block

UTC = timezone.utc


def _ts(text):
    return datetime.fromisoformat(text).replace(tzinfo=UTC).timestamp()


def _csv_text(rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_COLUMNS)
    writer.writerows(rows)
    return io.StringIO(buf.getvalue())


GOOD_ROW = [
    "2024-03-04T08:05:00",
    "2024-03-04T08:19:00",
    "40.75",
    "-73.97",
    "40.76",
    "-73.96",
]


def test_parse_trips_counters_and_fields():
    bbox = BoundingBox(40.70, 40.88, -74.02, -73.91)
    rows = [
        GOOD_ROW,
        ["2024-03-04T09:00:00", "2024-03-04T09:10:00", "not-a-number", "-73.97", "40.76", "-73.96"],
        ["2024-03-04T09:00:00", "2024-03-04T09:10:00", "41.50", "-73.97", "40.76", "-73.96"],
        ["2024-03-04T09:10:00", "2024-03-04T09:00:00", "40.75", "-73.97", "40.76", "-73.96"],
        ["2024-03-04T10:00:00", "2024-03-04T10:20:00", "40.71", "-74.00", "40.72", "-73.99"],
    ]
    parsed = parse_trips(_csv_text(rows), bbox=bbox)
    s = parsed.summary
    assert (s.rows_read, s.kept) == (5, 2)
    assert (s.skipped_malformed, s.skipped_bbox, s.skipped_time_order) == (1, 1, 1)
    first = parsed.trips[0]
    assert first.pickup_time_s == _ts("2024-03-04T08:05:00")
    assert first.dropoff_time_s == _ts("2024-03-04T08:19:00")
    assert (first.pickup_lat, first.pickup_lon) == (40.75, -73.97)


def test_parse_trips_nonfinite_coordinates_are_malformed():
    rows = [
        ["2024-03-04T08:00:00", "2024-03-04T08:10:00", "nan", "-73.97", "40.76", "-73.96"],
        ["2024-03-04T08:00:00", "2024-03-04T08:10:00", "40.75", "inf", "40.76", "-73.96"],
    ]
    parsed = parse_trips(_csv_text(rows))
    assert parsed.summary.skipped_malformed == 2
    assert parsed.trips == []


def test_parse_trips_header_is_strict():
    buf = io.StringIO("a,b,c,d,e,f\n1,2,3,4,5,6\n")
    with pytest.raises(LibraryFormatError):
        parse_trips(buf)


def test_parse_trips_unknown_format():
    with pytest.raises(ValueError):
        parse_trips(_csv_text([GOOD_ROW]), fmt="xml")


def test_parse_trips_timezone_aware_timestamps():
    rows = [
        [
            "2024-03-04T03:05:00-05:00",
            "2024-03-04T03:19:00-05:00",
            "40.75",
            "-73.97",
            "40.76",
            "-73.96",
        ]
    ]
    parsed = parse_trips(_csv_text(rows))
    assert parsed.trips[0].pickup_time_s == _ts("2024-03-04T08:05:00")


def test_parse_trips_parquet_numeric_columns(tmp_path):
    pa = pytest.importorskip("pyarrow")
    pq = pytest.importorskip("pyarrow.parquet")
    table = pa.table(
        {
            "pickup_datetime": [1709539500.0],
            "dropoff_datetime": [1709540340.0],
            "pickup_lat": [40.75],
            "pickup_lon": [-73.97],
            "dropoff_lat": [40.76],
            "dropoff_lon": [-73.96],
        }
    )
    path = tmp_path / "trips.parquet"
    pq.write_table(table, path)
    parsed = parse_trips(path, fmt="parquet")
    assert parsed.summary.kept == 1
    assert parsed.trips[0].pickup_time_s == 1709539500.0


def test_compute_features_against_scipy():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rng.poisson(8.0, size=48).astype(float)
        f = compute_features(x)
        assert f.mean == pytest.approx(float(np.mean(x)), rel=1e-12)
        assert f.std == pytest.approx(float(np.std(x)), rel=1e-12)
        assert f.max == float(np.max(x))
        assert f.skewness == pytest.approx(
            float(sstats.skew(x, bias=True)), rel=1e-9, abs=1e-12
        )
        for lag, got in zip((1, 2, 3), f.autocorr):
            a, b = x[:-lag], x[lag:]
            want = np.mean((a - a.mean()) * (b - b.mean())) / (np.std(a) * np.std(b))
            assert got == pytest.approx(float(want), rel=1e-9, abs=1e-12)


def test_compute_features_degenerate():
    f = compute_features([5.0, 5.0, 5.0, 5.0])
    assert (f.mean, f.std, f.max, f.skewness) == (5.0, 0.0, 5.0, 0.0)
    assert f.autocorr == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        compute_features([])


def test_summary_feature_vector_order():
    f = SummaryFeatures(mean=1.0, std=2.0, max=3.0, skewness=4.0, autocorr=(5.0, 6.0, 7.0))
    assert list(f.as_vector()) == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]


def test_detect_events_flat_series_has_none():
    assert detect_events([6.0] * 48) == []


def test_detect_events_single_spike():
    x = [6.0] * 48
    x[20] = 60.0
    x[21] = 55.0
    events = detect_events(x, threshold=3.0, window=12)
    assert len(events) == 1
    ev = events[0]
    assert (ev.start_bin, ev.end_bin, ev.duration_bins) == (20, 21, 2)
    # trailing window at bin 20 is flat apart from the spike itself, so
    # median 6 and MAD 0 leave only the epsilon guard in the denominator
    assert ev.peak_intensity > 3.0
    assert ev.pre_surge_features == (pytest.approx(6.0), pytest.approx(0.0))


def test_detect_events_prefix_zero_padding():
    # a spike at bin 2 has only two observed pre-bins; the other four are
    # zero-padded, which the mean reflects
    x = [4.0, 4.0, 50.0] + [4.0] * 21
    events = detect_events(x, threshold=3.0, window=12)
    assert len(events) >= 1
    ev = events[0]
    assert ev.start_bin == 2
    assert ev.pre_surge_features[0] == pytest.approx((0 + 0 + 0 + 0 + 4 + 4) / 6.0)


def test_detect_events_rising_pre_surge_slope():
    x = [2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 80.0] + [6.0] * 17
    events = detect_events(x, threshold=3.0, window=12)
    spike = [e for e in events if e.start_bin == 6]
    assert spike and spike[0].pre_surge_features[1] == pytest.approx(2.0)


def test_detect_events_window_validation():
    with pytest.raises(ValueError):
        detect_events([1.0, 2.0], window=2)


def test_segment_blocks_binning_and_day_type():
    cfg = IngestConfig(bin_minutes=5, block_hours=4)
    base = _ts("2024-03-04T08:00:00")  # a Monday
    sat = _ts("2024-06-08T20:00:00")  # a Saturday
    trips = [
        TripRecord(base + 30.0, base + 400.0, 40.75, -73.97, 40.76, -73.96),
        TripRecord(base + 310.0, base + 900.0, 40.751, -73.971, 40.761, -73.961),
        TripRecord(base + 320.0, base + 900.0, 40.752, -73.972, 40.762, -73.962),
        TripRecord(sat + 10.0, sat + 500.0, 40.73, -73.99, 40.74, -73.98),
    ]
    lib = segment_blocks(trips, cfg)
    assert lib.block_ids == ["2024-03-04_08-12", "2024-06-08_20-24"]

    monday = lib.get("2024-03-04_08-12")
    assert monday.start_s == base
    assert len(monday.demand_series) == 48
    assert monday.demand_series[0] == 1
    assert monday.demand_series[1] == 2
    assert sum(monday.demand_series) == 3
    # hour_block is the index of the 4 h slot within the day (8..12 -> 2)
    assert monday.metadata == BlockMeta(month=3, day_type="weekday", hour_block=2)
    # OD pool is chronological and aligned with the series
    assert monday.od_pool[0] == ((40.75, -73.97), (40.76, -73.96))
    assert monday.features == compute_features(monday.demand_series)

    weekend = lib.get("2024-06-08_20-24")
    assert weekend.metadata.day_type == "weekend"
    assert weekend.metadata.hour_block == 5


def test_segment_blocks_holiday_flag():
    cfg = IngestConfig(holidays=("2024-07-04",))
    t = _ts("2024-07-04T12:30:00")
    lib = segment_blocks([TripRecord(t, t + 600.0, 40.75, -73.97, 40.76, -73.96)], cfg)
    assert lib.records[0].metadata.day_type == "holiday"


def test_regime_block_validates_pool_alignment():
    block = make_block([2, 1, 0])
    with pytest.raises(ValueError):
        RegimeBlock(
            block_id="bad",
            start_s=0.0,
            demand_series=(2, 1, 0),
            features=block.features,
            od_pool=block.od_pool[:-1],
            events=(),
            metadata=block.metadata,
        )


def test_library_rejects_duplicate_ids():
    b = make_block([1, 0], block_id="dup")
    with pytest.raises(ValueError):
        RegimeLibrary(records=[b, b])


def test_library_get_missing():
    lib = RegimeLibrary(records=[make_block([1, 0], block_id="only")])
    with pytest.raises(KeyError):
        lib.get("nope")


def test_ingest_config_validation():
    with pytest.raises(ValueError):
        IngestConfig(bin_minutes=0)
    with pytest.raises(ValueError):
        IngestConfig(bin_minutes=7)  # 240 minutes is not divisible by 7
    cfg = IngestConfig(bin_minutes=5, block_hours=4)
    assert cfg.bins_per_block == 48
    assert cfg.bin_s == 300.0


def test_save_load_roundtrip(tmp_path, tiny_library):
    path = tmp_path / "lib.json"
    save_library(tiny_library, path)
    loaded = load_library(path)
    assert loaded.build_config == tiny_library.build_config
    assert loaded.records == tiny_library.records


def test_roundtrip_preserves_events(tmp_path):
    series = [6.0] * 48
    series[10] = 90.0
    block = make_block(series, block_id="spiky")
    assert block.events
    lib = RegimeLibrary(records=[block])
    path = tmp_path / "lib.json"
    save_library(lib, path)
    assert load_library(path).records[0].events == block.events


def test_load_rejects_corruption(tmp_path, tiny_library):
    path = tmp_path / "lib.json"
    save_library(tiny_library, path)
    doc = json.loads(path.read_text())

    doc["payload"]["records"][0]["demand_series"][0] += 1
    bad = tmp_path / "tampered.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(LibraryFormatError):
        load_library(bad)


def test_load_rejects_bad_magic_and_version(tmp_path, tiny_library):
    path = tmp_path / "lib.json"
    save_library(tiny_library, path)
    doc = json.loads(path.read_text())

    wrong_magic = dict(doc, magic="SOMETHINGELSE")
    p1 = tmp_path / "magic.json"
    p1.write_text(json.dumps(wrong_magic))
    with pytest.raises(LibraryFormatError):
        load_library(p1)

    wrong_version = dict(doc, version=doc["version"] + 1)
    p2 = tmp_path / "version.json"
    p2.write_text(json.dumps(wrong_version))
    with pytest.raises(LibraryFormatError):
        load_library(p2)


def test_load_rejects_truncated_file(tmp_path, tiny_library):
    path = tmp_path / "lib.json"
    save_library(tiny_library, path)
    text = path.read_text()
    trunc = tmp_path / "trunc.json"
    trunc.write_text(text[: len(text) // 2])
    with pytest.raises(LibraryFormatError):
        load_library(trunc)
