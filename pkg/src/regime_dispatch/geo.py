"""Zoning and travel-time estimation.

Zones are cells of a deterministic axial hexagonal grid (pointy-top) whose
edge pitch at resolution 8 matches the familiar ~461 m hexagon edge; each
coarser resolution scales the edge by sqrt(7). Coordinates are projected to
local meters with an equirectangular projection around a fixed reference
point, so a given grid instance tiles the plane consistently. Zone ids are
opaque 64-bit integers valid within one grid.

Travel times come from one of three routers: great-circle distance at a
constant speed ("haversine"), the same scaled by a constant detour factor
("scaled"), or an OSRM table service ("osrm") with optional fallback to the
scaled router when the service is unreachable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_008.8
METERS_PER_DEG_LAT = 110_574.0
METERS_PER_DEG_LON_EQ = 111_320.0

# Hexagon edge length in meters at resolution 8; one resolution step scales
# the cell edge by sqrt(7).
RES8_EDGE_M = 461.354684

# Axial coordinates are packed into one int64 as two offset 27-bit words.
# 2**26 exceeds any |q| or |r| reachable on Earth even at resolution 15,
# and (q + offset) << 27 stays far below the int64 limit.
_ZONE_OFFSET = 1 << 26
_ZONE_SHIFT = 27
_ZONE_MASK = (1 << _ZONE_SHIFT) - 1

Point = tuple[float, float]  # (lat, lon)


@dataclass(frozen=True)
class BoundingBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self) -> None:
        if self.lat_min > self.lat_max or self.lon_min > self.lon_max:
            raise ValueError("bounding box min exceeds max")

    def contains(self, lat: float, lon: float) -> bool:
        return (
            self.lat_min <= lat <= self.lat_max
            and self.lon_min <= lon <= self.lon_max
        )

    @property
    def center(self) -> Point:
        return (
            0.5 * (self.lat_min + self.lat_max),
            0.5 * (self.lon_min + self.lon_max),
        )


DEFAULT_BBOX = BoundingBox(40.70, 40.88, -74.02, -73.91)


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters; accepts scalars or numpy arrays."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=float)) for v in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    if d.ndim == 0:
        return float(d)
    return d


@dataclass(frozen=True)
class RouterConfig:
    """Travel-time model. kind is one of haversine, scaled, osrm."""

    kind: str = "haversine"
    speed_kmh: float = 30.0
    scale_factor: float = 1.45
    osrm_base_url: str | None = None
    osrm_fallback: bool = True
    osrm_timeout_s: float = 5.0
    osrm_snap_decimals: int = 4
    osrm_max_concurrency: int = 4

    def __post_init__(self) -> None:
        if self.kind not in ("haversine", "scaled", "osrm"):
            raise ValueError(f"unknown router kind: {self.kind!r}")
        if self.speed_kmh <= 0:
            raise ValueError("speed_kmh must be positive")
        if self.scale_factor < 1.0:
            raise ValueError("scale_factor must be >= 1")
        if self.kind == "osrm" and not self.osrm_base_url:
            raise ValueError("osrm router requires osrm_base_url")

    @property
    def speed_ms(self) -> float:
        return self.speed_kmh * 1000.0 / 3600.0


@dataclass(frozen=True)
class HexGrid:
    """Axial hex zoning around a fixed reference point.

    Zone ids are only comparable between calls on the same grid instance
    (same reference point and resolution).
    """

    ref_lat: float = 40.75
    ref_lon: float = -74.0
    resolution: int = 8

    def __post_init__(self) -> None:
        if not 0 <= self.resolution <= 15:
            raise ValueError("resolution must be in [0, 15]")

    @classmethod
    def for_bbox(cls, bbox: BoundingBox, resolution: int = 8) -> "HexGrid":
        lat0, lon0 = bbox.center
        return cls(ref_lat=lat0, ref_lon=lon0, resolution=resolution)

    @property
    def edge_m(self) -> float:
        return RES8_EDGE_M * math.sqrt(7.0) ** (8 - self.resolution)

    def _to_xy(self, lat, lon):
        mlon = METERS_PER_DEG_LON_EQ * math.cos(math.radians(self.ref_lat))
        x = (np.asarray(lon, dtype=float) - self.ref_lon) * mlon
        y = (np.asarray(lat, dtype=float) - self.ref_lat) * METERS_PER_DEG_LAT
        return x, y

    def zone_of(self, lat: float, lon: float) -> int:
        return int(self.zones_of(np.asarray([lat]), np.asarray([lon]))[0])

    def zones_of(self, lats, lons) -> np.ndarray:
        """Vectorized zone_of: arrays of latitudes/longitudes to int64 ids."""
        x, y = self._to_xy(lats, lons)
        size = self.edge_m
        qf = (math.sqrt(3.0) / 3.0 * x - y / 3.0) / size
        rf = (2.0 / 3.0 * y) / size
        q, r = _axial_round(qf, rf)
        if np.any(np.abs(q) >= _ZONE_OFFSET) or np.any(np.abs(r) >= _ZONE_OFFSET):
            raise ValueError("axial coordinate out of packable range")
        return ((q + _ZONE_OFFSET) << _ZONE_SHIFT) | (r + _ZONE_OFFSET)

    def centroid(self, zone: int) -> Point:
        q = (int(zone) >> _ZONE_SHIFT) - _ZONE_OFFSET
        r = (int(zone) & _ZONE_MASK) - _ZONE_OFFSET
        size = self.edge_m
        x = size * math.sqrt(3.0) * (q + r / 2.0)
        y = size * 1.5 * r
        mlon = METERS_PER_DEG_LON_EQ * math.cos(math.radians(self.ref_lat))
        return (self.ref_lat + y / METERS_PER_DEG_LAT, self.ref_lon + x / mlon)

    def zones_covering_bbox(self, bbox: BoundingBox, samples: int = 250) -> list[int]:
        """Distinct zones touched by a dense lattice of points over bbox."""
        lats = np.linspace(bbox.lat_min, bbox.lat_max, samples)
        lons = np.linspace(bbox.lon_min, bbox.lon_max, samples)
        glat, glon = np.meshgrid(lats, lons)
        ids = self.zones_of(glat.ravel(), glon.ravel())
        return sorted(int(z) for z in np.unique(ids))


def _axial_round(qf, rf):
    """Cube-round fractional axial coordinates to the containing cell."""
    xf = np.asarray(qf, dtype=float)
    zf = np.asarray(rf, dtype=float)
    yf = -xf - zf
    rx = np.round(xf)
    ry = np.round(yf)
    rz = np.round(zf)
    dx = np.abs(rx - xf)
    dy = np.abs(ry - yf)
    dz = np.abs(rz - zf)
    fix_x = (dx > dy) & (dx > dz)
    fix_z = ~fix_x & (dz > dy)
    rx = np.where(fix_x, -ry - rz, rx)
    rz = np.where(fix_z, -rx - ry, rz)
    return rx.astype(np.int64), rz.astype(np.int64)


def zone_of(point: Point, resolution: int = 8, grid: HexGrid | None = None) -> int:
    """Zone id of a (lat, lon) point on the given grid (default NYC-anchored)."""
    g = grid if grid is not None else HexGrid(resolution=resolution)
    return g.zone_of(point[0], point[1])


def travel_time_s(a: Point, b: Point, cfg: RouterConfig, client=None) -> float:
    """Estimated driving seconds from a to b under the configured router."""
    if cfg.kind == "osrm":
        return float(travel_matrix([a], [b], cfg, client=client)[0, 0])
    d = haversine_m(a[0], a[1], b[0], b[1])
    if cfg.kind == "scaled":
        d = d * cfg.scale_factor
    return float(d / cfg.speed_ms)


def travel_matrix(
    origins: Sequence[Point],
    dests: Sequence[Point],
    cfg: RouterConfig,
    client=None,
) -> np.ndarray:
    """Pairwise travel seconds, origins as rows and destinations as columns."""
    if len(origins) == 0 or len(dests) == 0:
        return np.zeros((len(origins), len(dests)))
    if cfg.kind == "osrm":
        from . import osrm

        cl = client if client is not None else osrm.shared_client(cfg)
        try:
            return cl.durations(origins, dests)
        except osrm.OsrmError:
            if not cfg.osrm_fallback:
                raise
            fallback = RouterConfig(
                kind="scaled", speed_kmh=cfg.speed_kmh, scale_factor=cfg.scale_factor
            )
            return travel_matrix(origins, dests, fallback)
    o = np.asarray(origins, dtype=float)
    d = np.asarray(dests, dtype=float)
    dist = haversine_m(
        o[:, None, 0], o[:, None, 1], d[None, :, 0], d[None, :, 1]
    )
    dist = np.asarray(dist, dtype=float).reshape(len(origins), len(dests))
    if cfg.kind == "scaled":
        dist = dist * cfg.scale_factor
    return dist / cfg.speed_ms


_zone_matrix_cache: dict = {}


def zone_travel_matrix(
    zones: Sequence[int], cfg: RouterConfig, grid: HexGrid, client=None
) -> np.ndarray:
    """Centroid-to-centroid travel seconds for a zone list; memoized.

    The cache key is (zones, router config, grid); pass the same tuple to hit.
    """
    key = (tuple(int(z) for z in zones), cfg, grid)
    hit = _zone_matrix_cache.get(key)
    if hit is not None:
        return hit
    cents = [grid.centroid(z) for z in zones]
    mat = travel_matrix(cents, cents, cfg, client=client)
    mat.setflags(write=False)
    _zone_matrix_cache[key] = mat
    return mat


def clear_zone_matrix_cache() -> None:
    _zone_matrix_cache.clear()


def positions_in_zone(
    grid: HexGrid, positions: Iterable[Point], zone: int
) -> list[int]:
    """Indices of positions falling in the given zone."""
    pts = list(positions)
    if not pts:
        return []
    arr = np.asarray(pts, dtype=float)
    ids = grid.zones_of(arr[:, 0], arr[:, 1])
    return [i for i, z in enumerate(ids) if int(z) == int(zone)]
