"""Trip ingestion and regime-library construction.

Raw trip records are filtered to a bounding box, grouped into fixed-length
daily hour blocks (default 4 h), and binned into a demand-count series
(default 5-minute bins, 48 per block). Each block also keeps its
origin-destination pairs, summary features of the series, detected surge
events, and calendar metadata. A collection of blocks plus the configuration
that built it forms a library that can be saved to and loaded from a
checksummed JSON file.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geo import BoundingBox

LIBRARY_MAGIC = "RCDLIB1"
LIBRARY_VERSION = 1

CSV_COLUMNS = (
    "pickup_datetime",
    "dropoff_datetime",
    "pickup_lat",
    "pickup_lon",
    "dropoff_lat",
    "dropoff_lon",
)


class LibraryFormatError(ValueError):
    """Raised when a library file is missing, corrupt, or incompatible."""


@dataclass(frozen=True)
class TripRecord:
    pickup_time_s: float
    dropoff_time_s: float
    pickup_lat: float
    pickup_lon: float
    dropoff_lat: float
    dropoff_lon: float

    @property
    def pickup(self) -> tuple[float, float]:
        return (self.pickup_lat, self.pickup_lon)

    @property
    def dropoff(self) -> tuple[float, float]:
        return (self.dropoff_lat, self.dropoff_lon)


@dataclass(frozen=True)
class IngestSummary:
    rows_read: int = 0
    kept: int = 0
    skipped_malformed: int = 0
    skipped_bbox: int = 0
    skipped_time_order: int = 0


@dataclass(frozen=True)
class ParsedTrips:
    trips: list[TripRecord]
    summary: IngestSummary

    def __iter__(self):
        return iter(self.trips)

    def __len__(self) -> int:
        return len(self.trips)


@dataclass(frozen=True)
class SummaryFeatures:
    """Seven per-series summary statistics used by the feature metric."""

    mean: float
    std: float
    max: float
    skewness: float
    autocorr: tuple[float, float, float]

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.mean, self.std, self.max, self.skewness, *self.autocorr],
            dtype=float,
        )

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "SummaryFeatures":
        v = [float(x) for x in v]
        if len(v) != 7:
            raise ValueError("feature vector must have 7 entries")
        return cls(v[0], v[1], v[2], v[3], (v[4], v[5], v[6]))


@dataclass(frozen=True)
class SurgeEvent:
    start_bin: int
    end_bin: int  # inclusive
    peak_intensity: float
    duration_bins: int
    pre_surge_features: tuple[float, float]  # (mean, slope) of the 6 bins before start


@dataclass(frozen=True)
class BlockMeta:
    month: int
    day_type: str  # weekday | weekend | holiday
    hour_block: int  # index of the block within the day


@dataclass(frozen=True)
class RegimeBlock:
    block_id: str
    start_s: float
    demand_series: tuple[int, ...]
    features: SummaryFeatures
    od_pool: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    events: tuple[SurgeEvent, ...]
    metadata: BlockMeta

    def __post_init__(self) -> None:
        if sum(self.demand_series) != len(self.od_pool):
            raise ValueError("demand series total must equal od_pool size")

    @property
    def total_demand(self) -> int:
        return len(self.od_pool)

    def series_array(self) -> np.ndarray:
        return np.asarray(self.demand_series, dtype=float)


@dataclass(frozen=True)
class IngestConfig:
    bin_minutes: int = 5
    block_hours: int = 4
    bbox: BoundingBox | None = None
    event_threshold: float = 3.0
    event_window: int = 12
    holidays: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.bin_minutes <= 0 or self.block_hours <= 0:
            raise ValueError("bin_minutes and block_hours must be positive")
        if (self.block_hours * 60) % self.bin_minutes != 0:
            raise ValueError("block length must be a whole number of bins")

    @property
    def bins_per_block(self) -> int:
        return self.block_hours * 60 // self.bin_minutes

    @property
    def bin_s(self) -> float:
        return self.bin_minutes * 60.0


@dataclass
class RegimeLibrary:
    records: list[RegimeBlock]
    build_config: IngestConfig = field(default_factory=IngestConfig)

    def __post_init__(self) -> None:
        ids = [r.block_id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate block ids in library")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def block_ids(self) -> list[str]:
        return [r.block_id for r in self.records]

    def get(self, block_id: str) -> RegimeBlock:
        for r in self.records:
            if r.block_id == block_id:
                return r
        raise KeyError(f"no block {block_id!r} in library")


def _parse_ts(text: str) -> float:
    dt = datetime.fromisoformat(text.strip())
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def parse_trips(
    source,
    bbox: BoundingBox | None = None,
    fmt: str = "csv",
) -> ParsedTrips:
    """Read and validate raw trips from a CSV (or parquet) source.

    Rows that fail to parse are counted and skipped; rows with either
    endpoint outside bbox or with dropoff before pickup are filtered with
    their own counters. Record order follows the input.
    """
    if fmt == "csv":
        rows = _iter_csv_rows(source)
    elif fmt == "parquet":
        rows = _iter_parquet_rows(source)
    else:
        raise ValueError(f"unknown trip format: {fmt!r}")

    trips: list[TripRecord] = []
    read = malformed = out_bbox = bad_time = 0
    for raw in rows:
        read += 1
        try:
            rec = TripRecord(
                pickup_time_s=_parse_ts(raw[0]) if isinstance(raw[0], str) else float(raw[0]),
                dropoff_time_s=_parse_ts(raw[1]) if isinstance(raw[1], str) else float(raw[1]),
                pickup_lat=float(raw[2]),
                pickup_lon=float(raw[3]),
                dropoff_lat=float(raw[4]),
                dropoff_lon=float(raw[5]),
            )
        except (ValueError, TypeError, IndexError):
            malformed += 1
            continue
        if not (
            math.isfinite(rec.pickup_lat)
            and math.isfinite(rec.pickup_lon)
            and math.isfinite(rec.dropoff_lat)
            and math.isfinite(rec.dropoff_lon)
        ):
            malformed += 1
            continue
        if rec.dropoff_time_s < rec.pickup_time_s:
            bad_time += 1
            continue
        if bbox is not None and not (
            bbox.contains(rec.pickup_lat, rec.pickup_lon)
            and bbox.contains(rec.dropoff_lat, rec.dropoff_lon)
        ):
            out_bbox += 1
            continue
        trips.append(rec)

    return ParsedTrips(
        trips,
        IngestSummary(
            rows_read=read,
            kept=len(trips),
            skipped_malformed=malformed,
            skipped_bbox=out_bbox,
            skipped_time_order=bad_time,
        ),
    )


def _iter_csv_rows(source):
    if isinstance(source, (str, Path)):
        fh = open(source, newline="")
        close = True
    elif isinstance(source, io.TextIOBase):
        fh = source
        close = False
    else:
        raise TypeError("csv source must be a path or text stream")
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        header = [h.strip() for h in header]
        if header != list(CSV_COLUMNS):
            raise LibraryFormatError(
                f"unexpected trip CSV header: {header!r}; want {list(CSV_COLUMNS)!r}"
            )
        for row in reader:
            if not row:
                continue
            yield row
    finally:
        if close:
            fh.close()


def _iter_parquet_rows(source):
    try:
        import pyarrow.parquet as pq
    except ImportError as exc:  # pragma: no cover - environment dependent
        raise ImportError(
            "parquet input requires pyarrow (install the 'parquet' extra)"
        ) from exc
    table = pq.read_table(source, columns=list(CSV_COLUMNS))
    cols = [table.column(c).to_pylist() for c in CSV_COLUMNS]
    for row in zip(*cols):
        yield [
            v.isoformat() if isinstance(v, datetime) else v
            for v in row
        ]


def compute_features(series) -> SummaryFeatures:
    """Mean, std, max, skewness, and lag-1..3 autocorrelations of a series.

    Population moments throughout; skewness and autocorrelation are defined
    as 0 when the relevant variance vanishes.
    """
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise ValueError("cannot compute features of an empty series")
    mu = float(np.mean(x))
    sd = float(np.std(x))
    mx = float(np.max(x))
    if sd > 0:
        skew = float(np.mean(((x - mu) / sd) ** 3))
    else:
        skew = 0.0
    ac = tuple(_autocorr(x, lag) for lag in (1, 2, 3))
    return SummaryFeatures(mean=mu, std=sd, max=mx, skewness=skew, autocorr=ac)


def _autocorr(x: np.ndarray, lag: int) -> float:
    if x.size <= lag:
        return 0.0
    a = x[:-lag]
    b = x[lag:]
    if a.size < 2:
        return 0.0
    sa = np.std(a)
    sb = np.std(b)
    if sa == 0 or sb == 0:
        return 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def detect_events(
    series, threshold: float = 3.0, window: int = 12
) -> list[SurgeEvent]:
    """Surge events: maximal runs of bins whose rolling robust z >= threshold.

    The z-score of bin t uses the median and MAD of the trailing window that
    ends at t (shorter at the start of the series), with the conventional
    1.4826 MAD-to-sigma factor and a small epsilon guard so constant windows
    do not divide by zero.
    """
    if window < 3:
        raise ValueError("window must be >= 3")
    x = np.asarray(series, dtype=float)
    n = x.size
    z = np.zeros(n)
    for t in range(n):
        w = x[max(0, t - window + 1) : t + 1]
        med = np.median(w)
        mad = np.median(np.abs(w - med))
        z[t] = (x[t] - med) / (1.4826 * mad + 1e-9)

    events: list[SurgeEvent] = []
    t = 0
    while t < n:
        if z[t] >= threshold:
            start = t
            while t + 1 < n and z[t + 1] >= threshold:
                t += 1
            end = t
            pre = x[max(0, start - 6) : start]
            if pre.size < 6:
                pre = np.concatenate([np.zeros(6 - pre.size), pre])
            slope = float(np.polyfit(np.arange(6.0), pre, 1)[0])
            events.append(
                SurgeEvent(
                    start_bin=start,
                    end_bin=end,
                    peak_intensity=float(np.max(z[start : end + 1])),
                    duration_bins=end - start + 1,
                    pre_surge_features=(float(np.mean(pre)), slope),
                )
            )
        t += 1
    return events


def segment_blocks(
    trips: Iterable[TripRecord],
    config: IngestConfig | None = None,
) -> RegimeLibrary:
    """Group trips into per-(date, hour-block) regime blocks.

    Within a block, trips are ordered by pickup time so the OD pool is
    chronological; the demand series counts pickups per bin.
    """
    cfg = config or IngestConfig()
    T = cfg.bins_per_block
    block_len_s = cfg.block_hours * 3600.0
    holidays = set(cfg.holidays)

    groups: dict[tuple[str, int], list[TripRecord]] = {}
    for trip in trips:
        dt = datetime.fromtimestamp(trip.pickup_time_s, tz=timezone.utc)
        block_idx = dt.hour // cfg.block_hours
        groups.setdefault((dt.date().isoformat(), block_idx), []).append(trip)

    records: list[RegimeBlock] = []
    for (date_iso, block_idx), members in sorted(groups.items()):
        h0 = block_idx * cfg.block_hours
        day_start = datetime.fromisoformat(date_iso).replace(tzinfo=timezone.utc)
        start_s = day_start.timestamp() + h0 * 3600.0
        members = sorted(members, key=lambda t: t.pickup_time_s)

        series = [0] * T
        pool = []
        for trip in members:
            offset = trip.pickup_time_s - start_s
            if not 0 <= offset < block_len_s:
                raise AssertionError("trip assigned to wrong block")
            series[int(offset // cfg.bin_s)] += 1
            pool.append((trip.pickup, trip.dropoff))

        if date_iso in holidays:
            day_type = "holiday"
        elif day_start.weekday() >= 5:
            day_type = "weekend"
        else:
            day_type = "weekday"

        records.append(
            RegimeBlock(
                block_id=f"{date_iso}_{h0:02d}-{h0 + cfg.block_hours:02d}",
                start_s=start_s,
                demand_series=tuple(series),
                features=compute_features(series),
                od_pool=tuple(pool),
                events=tuple(
                    detect_events(series, cfg.event_threshold, cfg.event_window)
                ),
                metadata=BlockMeta(
                    month=day_start.month,
                    day_type=day_type,
                    hour_block=block_idx,
                ),
            )
        )
    return RegimeLibrary(records=records, build_config=cfg)


def _config_to_json(cfg: IngestConfig) -> dict:
    return {
        "bin_minutes": cfg.bin_minutes,
        "block_hours": cfg.block_hours,
        "bbox": (
            [cfg.bbox.lat_min, cfg.bbox.lat_max, cfg.bbox.lon_min, cfg.bbox.lon_max]
            if cfg.bbox
            else None
        ),
        "event_threshold": cfg.event_threshold,
        "event_window": cfg.event_window,
        "holidays": list(cfg.holidays),
    }


def _config_from_json(obj: dict) -> IngestConfig:
    bbox = obj.get("bbox")
    return IngestConfig(
        bin_minutes=obj["bin_minutes"],
        block_hours=obj["block_hours"],
        bbox=BoundingBox(*bbox) if bbox else None,
        event_threshold=obj["event_threshold"],
        event_window=obj["event_window"],
        holidays=tuple(obj.get("holidays", ())),
    )


def _block_to_json(b: RegimeBlock) -> dict:
    return {
        "block_id": b.block_id,
        "start_s": b.start_s,
        "demand_series": list(b.demand_series),
        "features": list(b.features.as_vector()),
        "od_pool": [[p[0], p[1], d[0], d[1]] for p, d in b.od_pool],
        "events": [
            {
                "start_bin": e.start_bin,
                "end_bin": e.end_bin,
                "peak_intensity": e.peak_intensity,
                "duration_bins": e.duration_bins,
                "pre_surge_features": list(e.pre_surge_features),
            }
            for e in b.events
        ],
        "metadata": {
            "month": b.metadata.month,
            "day_type": b.metadata.day_type,
            "hour_block": b.metadata.hour_block,
        },
    }


def _block_from_json(obj: dict) -> RegimeBlock:
    return RegimeBlock(
        block_id=obj["block_id"],
        start_s=float(obj["start_s"]),
        demand_series=tuple(int(c) for c in obj["demand_series"]),
        features=SummaryFeatures.from_vector(obj["features"]),
        od_pool=tuple(
            ((row[0], row[1]), (row[2], row[3])) for row in obj["od_pool"]
        ),
        events=tuple(
            SurgeEvent(
                start_bin=e["start_bin"],
                end_bin=e["end_bin"],
                peak_intensity=e["peak_intensity"],
                duration_bins=e["duration_bins"],
                pre_surge_features=tuple(e["pre_surge_features"]),
            )
            for e in obj["events"]
        ),
        metadata=BlockMeta(
            month=obj["metadata"]["month"],
            day_type=obj["metadata"]["day_type"],
            hour_block=obj["metadata"]["hour_block"],
        ),
    )


def _payload_checksum(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_library(lib: RegimeLibrary, path) -> None:
    payload = {
        "build_config": _config_to_json(lib.build_config),
        "records": [_block_to_json(b) for b in lib.records],
    }
    doc = {
        "magic": LIBRARY_MAGIC,
        "version": LIBRARY_VERSION,
        "checksum": _payload_checksum(payload),
        "payload": payload,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_library(path) -> RegimeLibrary:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise LibraryFormatError(f"cannot read library file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("magic") != LIBRARY_MAGIC:
        raise LibraryFormatError("not a regime library file (bad magic)")
    if doc.get("version") != LIBRARY_VERSION:
        raise LibraryFormatError(f"unsupported library version {doc.get('version')!r}")
    payload = doc.get("payload")
    if payload is None or doc.get("checksum") != _payload_checksum(payload):
        raise LibraryFormatError("library checksum mismatch; file corrupted")
    try:
        return RegimeLibrary(
            records=[_block_from_json(b) for b in payload["records"]],
            build_config=_config_from_json(payload["build_config"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise LibraryFormatError(f"malformed library payload: {exc}") from exc
