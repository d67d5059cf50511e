"""Synthetic demand families for controlled experiments.

Four regime families with distinct temporal shapes and spatial structure:

  rush    morning commute: a smooth peak in the middle of the block,
          pickups concentrated in residential clusters, dropoffs downtown
  flat    midday: near-constant rate, diffuse origins and destinations
  surge   evening event: moderate base plus a sharp multi-bin spike,
          pickups massed around the venue during the whole block
  night   late weekend: demand decaying from an early-block high, pickups
          in nightlife clusters, dropoffs spread residentially

Blocks are produced as raw trip records on real calendar dates and pushed
through the normal segmentation pipeline, so every invariant of ingested
data holds for synthetic data too. Generation is seeded and validates that
blocks are more similar within a family than across families.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from datetime import date, timedelta
from typing import Sequence

import numpy as np

from .geo import BoundingBox, DEFAULT_BBOX, haversine_m
from .ingestion import IngestConfig, RegimeBlock, RegimeLibrary, TripRecord, segment_blocks
from .similarity import DEFAULT_WEIGHTS, QueryContext, ensemble_score, library_feature_scale

FAMILIES = ("rush", "flat", "surge", "night")

# Service area that hugs the synthetic clusters (roughly 4 sigma around
# every hotspot). Fleets initialize uniformly over the experiment bbox, so
# a bbox much wider than the demand would start every driver far away and
# swamp the first half hour with cold-start pickup legs.
SYNTH_BBOX = BoundingBox(40.728, 40.788, -74.000, -73.932)


class GenerationError(RuntimeError):
    """Raised when a synthetic library fails its separability validation."""


@dataclass(frozen=True)
class Hotspot:
    lat: float
    lon: float
    weight: float
    sigma_deg: float = 0.01


@dataclass(frozen=True)
class SyntheticProfile:
    name: str
    family: str
    base_rate: float  # requests per bin away from the peak
    peak_multiplier: float
    hour_start: int
    months: tuple[int, ...]
    day_type: str  # weekday | weekend
    pickup_hotspots: tuple[Hotspot, ...]
    dropoff_hotspots: tuple[Hotspot, ...]
    level_jitter_sigma: float = 0.05
    # Short recurring demand pulses (start_bin, width_bins, multiplier):
    # school runs, lunch rushes, closing times. They repeat at the same
    # bins in every block of the family, so a calibrated prior can see
    # them coming while a replay baseline takes the queue on the chin.
    pulses: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.day_type not in ("weekday", "weekend"):
            raise ValueError("day_type must be weekday or weekend")
        for spots in (self.pickup_hotspots, self.dropoff_hotspots):
            if not spots or abs(sum(h.weight for h in spots) - 1.0) > 1e-9:
                raise ValueError("hotspot weights must be non-empty and sum to 1")
        for start, width, mult in self.pulses:
            if start < 0 or width <= 0 or mult <= 0:
                raise ValueError("pulse fields must be positive")

    def rate(self, t: int, n_bins: int = 48) -> float:
        """Expected requests in bin t (before per-block level jitter)."""
        b = self.base_rate
        peak = self.peak_multiplier
        if self.family == "rush":
            center = n_bins * 0.5
            out = b * (1.0 + (peak - 1.0) * math.exp(-(((t - center) / 7.0) ** 2)))
        elif self.family == "flat":
            out = b
        elif self.family == "surge":
            lo = int(n_bins * 0.50)
            hi = int(n_bins * 0.625)
            out = b * peak if lo <= t < hi else b
        else:
            # night: exponential decay from an early high toward the base
            out = b * (1.0 + (peak - 1.0) * math.exp(-t / 16.0))
        for start, width, mult in self.pulses:
            if start <= t < start + width:
                out *= mult
        return out


def default_profiles(
    base_rate: float = 11.0,
) -> tuple[SyntheticProfile, ...]:
    """The four canonical families, spatially anchored in the default bbox.

    Cluster geometry matters: a fleet sized at 15% of the hourly rate gets
    540 driver-seconds per request regardless of the rate, so mean rides are
    kept in the 3 to 6 minute range to leave idle headroom, and pickup
    clusters sit 1.2 to 1.4 km from dropoff clusters (except the errand-like
    flat family) so idle supply drifts away from demand and repositioning has
    real work to do.
    """
    residential = (
        Hotspot(40.7630, -73.9600, 0.45, 0.0030),
        Hotspot(40.7652, -73.9560, 0.35, 0.0032),
        Hotspot(40.7598, -73.9646, 0.20, 0.0032),
    )
    downtown = (
        Hotspot(40.7548, -73.9692, 0.70, 0.0030),
        Hotspot(40.7516, -73.9648, 0.30, 0.0032),
    )
    office = (
        Hotspot(40.7535, -73.9705, 0.70, 0.0030),
        Hotspot(40.7503, -73.9661, 0.30, 0.0032),
    )
    diffuse = (
        Hotspot(40.7614, -73.9624, 0.40, 0.0095),
        Hotspot(40.7540, -73.9704, 0.35, 0.0095),
        Hotspot(40.7660, -73.9570, 0.25, 0.0095),
    )
    errands = (
        Hotspot(40.7614, -73.9624, 0.25, 0.0095),
        Hotspot(40.7540, -73.9704, 0.45, 0.0095),
        Hotspot(40.7660, -73.9570, 0.30, 0.0095),
    )
    venue = (
        Hotspot(40.7540, -73.9694, 0.75, 0.0028),
        Hotspot(40.7566, -73.9660, 0.25, 0.0040),
    )
    nightlife = (
        Hotspot(40.7548, -73.9700, 0.60, 0.0034),
        Hotspot(40.7580, -73.9744, 0.40, 0.0034),
    )

    def blend(far, near, far_share):
        spots = [Hotspot(h.lat, h.lon, h.weight * far_share, h.sigma_deg) for h in far]
        spots += [Hotspot(h.lat, h.lon, h.weight * (1.0 - far_share), h.sigma_deg) for h in near]
        return tuple(spots)

    # Family mean rates are kept well apart (roughly 14.3 / 10.2 / 11.8 /
    # 6.5 requests per bin) so that blocks from different families differ
    # in their value distributions by more than the Poisson noise floor.
    # Peak multipliers are as low as contention allows: batched matching
    # only beats greedy matching when drivers are scarce part of the time,
    # while wait tails must stay clear of the expiry cutoff.
    # Pickup and dropoff mixes are two-sided blends so each family has a
    # slow cross-pocket mode alongside a fast local mode; the recurring
    # pulses add brief queue spikes a calibrated prior can anticipate.
    return (
        SyntheticProfile(
            name="rush",
            family="rush",
            base_rate=base_rate * 0.943,
            peak_multiplier=1.6,
            hour_start=8,
            months=(1, 3),
            day_type="weekday",
            pickup_hotspots=blend(residential, downtown, 0.62),
            dropoff_hotspots=blend(office, residential, 0.66),
            pulses=((8, 3, 2.9), (38, 3, 2.9)),
        ),
        SyntheticProfile(
            name="flat",
            family="flat",
            base_rate=base_rate * 0.845,
            peak_multiplier=1.0,
            hour_start=12,
            months=(6, 8),
            day_type="weekday",
            pickup_hotspots=diffuse,
            dropoff_hotspots=errands,
            pulses=((12, 2, 2.2), (36, 2, 2.2)),
        ),
        SyntheticProfile(
            name="surge",
            family="surge",
            base_rate=base_rate * 0.950,
            peak_multiplier=2.15,
            hour_start=16,
            months=(1, 3),
            day_type="weekday",
            pickup_hotspots=venue,
            dropoff_hotspots=residential,
        ),
        SyntheticProfile(
            name="night",
            family="night",
            base_rate=base_rate * 0.390,
            peak_multiplier=2.0,
            hour_start=20,
            months=(6, 7, 8, 9),
            day_type="weekend",
            pickup_hotspots=blend(nightlife, residential, 0.70),
            dropoff_hotspots=blend(residential, nightlife, 0.55),
            pulses=((8, 2, 2.4), (30, 2, 2.4)),
        ),
    )


def family_dates(profile: SyntheticProfile, year: int = 2024) -> list[str]:
    """ISO dates matching the profile's months and day type, in order."""
    out = []
    for month in profile.months:
        d = date(year, month, 1)
        while d.month == month:
            is_weekend = d.weekday() >= 5
            if (profile.day_type == "weekend") == is_weekend:
                out.append(d.isoformat())
            d += timedelta(days=1)
    return out


def _sample_mixture(
    rng: np.random.Generator,
    spots: Sequence[Hotspot],
    bbox: BoundingBox,
    n: int,
) -> np.ndarray:
    weights = np.array([h.weight for h in spots])
    idx = rng.choice(len(spots), size=n, p=weights)
    lat = np.empty(n)
    lon = np.empty(n)
    for i, k in enumerate(idx):
        h = spots[int(k)]
        lat[i] = rng.normal(h.lat, h.sigma_deg)
        lon[i] = rng.normal(h.lon, h.sigma_deg * 1.3)
    lat = np.clip(lat, bbox.lat_min + 1e-4, bbox.lat_max - 1e-4)
    lon = np.clip(lon, bbox.lon_min + 1e-4, bbox.lon_max - 1e-4)
    return np.stack([lat, lon], axis=1)


def generate_block_trips(
    profile: SyntheticProfile,
    date_iso: str,
    rng: np.random.Generator,
    bbox: BoundingBox = DEFAULT_BBOX,
    bin_minutes: int = 5,
    block_hours: int = 4,
) -> list[TripRecord]:
    """One block's worth of trips on the given date, Poisson per bin."""
    from datetime import datetime, timezone

    start = datetime.fromisoformat(date_iso).replace(tzinfo=timezone.utc)
    start_s = start.timestamp() + profile.hour_start * 3600.0
    bin_s = bin_minutes * 60.0
    n_bins = block_hours * 60 // bin_minutes
    level = float(rng.lognormal(0.0, profile.level_jitter_sigma))

    trips: list[TripRecord] = []
    for t in range(n_bins):
        n = int(rng.poisson(profile.rate(t, n_bins) * level))
        if n == 0:
            continue
        times = np.sort(rng.uniform(0.0, bin_s, size=n)) + start_s + t * bin_s
        pk = _sample_mixture(rng, profile.pickup_hotspots, bbox, n)
        dr = _sample_mixture(rng, profile.dropoff_hotspots, bbox, n)
        dist = haversine_m(pk[:, 0], pk[:, 1], dr[:, 0], dr[:, 1])
        dur = np.asarray(dist, dtype=float).reshape(n) / (30_000.0 / 3600.0) * 1.3 + 120.0
        for i in range(n):
            trips.append(
                TripRecord(
                    pickup_time_s=float(times[i]),
                    dropoff_time_s=float(times[i] + dur[i]),
                    pickup_lat=float(pk[i, 0]),
                    pickup_lon=float(pk[i, 1]),
                    dropoff_lat=float(dr[i, 0]),
                    dropoff_lon=float(dr[i, 1]),
                )
            )
    return trips


def generate_synthetic_library(
    blocks_per_profile: int = 30,
    seed: int = 7,
    bbox: BoundingBox = DEFAULT_BBOX,
    profiles: Sequence[SyntheticProfile] | None = None,
    reserve_dates: int = 6,
    validate: bool = True,
) -> RegimeLibrary:
    """Seeded library of synthetic blocks across all profiles.

    The last reserve_dates calendar dates of each profile's pool are never
    used here; they are held out for truth blocks (see truth_block). Raises
    GenerationError if blocks are not more similar within families than
    across them.
    """
    profs = tuple(profiles) if profiles is not None else default_profiles()
    rng = np.random.default_rng(seed)
    all_trips: list[TripRecord] = []
    for profile in profs:
        pool = family_dates(profile)
        usable = pool[: len(pool) - reserve_dates]
        if len(usable) < blocks_per_profile:
            raise GenerationError(
                f"profile {profile.name!r} has {len(usable)} usable dates, "
                f"needs {blocks_per_profile}"
            )
        for date_iso in usable[:blocks_per_profile]:
            all_trips.extend(generate_block_trips(profile, date_iso, rng, bbox))

    lib = segment_blocks(all_trips, IngestConfig(bbox=bbox))
    if len(lib) != blocks_per_profile * len(profs):
        raise GenerationError("profiles produced overlapping blocks")
    if validate:
        _validate_separation(lib, profs)
    return lib


def block_family(block: RegimeBlock, profiles: Sequence[SyntheticProfile]) -> str:
    """Which profile generated this block, judged by its calendar slot."""
    for p in profiles:
        if (
            block.metadata.month in p.months
            and block.metadata.hour_block == p.hour_start // 4
        ):
            return p.name
    raise KeyError(f"block {block.block_id} matches no profile")


def _validate_separation(
    lib: RegimeLibrary, profiles: Sequence[SyntheticProfile], per_family: int = 8
) -> None:
    by_fam: dict[str, list[RegimeBlock]] = {}
    for b in lib.records:
        by_fam.setdefault(block_family(b, profiles), []).append(b)
    sample = {f: blocks[:per_family] for f, blocks in by_fam.items()}
    scale = library_feature_scale(lib)
    thr = lib.build_config.event_threshold
    win = lib.build_config.event_window

    def score(a: RegimeBlock, b: RegimeBlock) -> float:
        qc = QueryContext.from_block(a)
        return ensemble_score(qc, b, DEFAULT_WEIGHTS, scale, thr, win).total_score

    within: list[float] = []
    cross: list[float] = []
    fams = sorted(sample)
    for fi, fa in enumerate(fams):
        blocks_a = sample[fa]
        for i, a in enumerate(blocks_a):
            for b in blocks_a[i + 1 :]:
                within.append(score(a, b))
        for fb in fams[fi + 1 :]:
            for a in blocks_a:
                for b in sample[fb]:
                    cross.append(score(a, b))
    if not within or not cross:
        raise GenerationError("not enough blocks to validate separation")
    if float(np.mean(within)) <= float(np.mean(cross)):
        raise GenerationError(
            f"families are not separable: within {np.mean(within):.3f} "
            f"<= cross {np.mean(cross):.3f}"
        )


def truth_block(
    profile: SyntheticProfile,
    truth_index: int = 0,
    seed: int = 7,
    bbox: BoundingBox = DEFAULT_BBOX,
    reserve_dates: int = 6,
) -> tuple[RegimeBlock, list[TripRecord]]:
    """A held-out block from the profile's reserved dates, plus its trips.

    truth_index selects among the reserved dates (0 is the last date of the
    pool). The RNG stream is derived from (seed, profile, index) and is
    disjoint from the library stream by construction of default_rng.
    """
    pool = family_dates(profile)
    if not 0 <= truth_index < reserve_dates:
        raise ValueError("truth_index out of reserved range")
    date_iso = pool[len(pool) - 1 - truth_index]
    name_key = int.from_bytes(hashlib.sha256(profile.name.encode()).digest()[:4], "big")
    child = np.random.default_rng([seed, name_key, truth_index])
    trips = generate_block_trips(profile, date_iso, child, bbox)
    lib = segment_blocks(trips, IngestConfig(bbox=bbox))
    if len(lib) != 1:
        raise GenerationError("truth trips spilled over multiple blocks")
    return lib.records[0], trips


def scaled_profiles(
    profiles: Sequence[SyntheticProfile], overrides: dict[str, dict]
) -> tuple[SyntheticProfile, ...]:
    """Apply per-profile field overrides (e.g. base_rate) from a config."""
    out = []
    for p in profiles:
        ov = overrides.get(p.name)
        out.append(replace(p, **ov) if ov else p)
    return tuple(out)
