"""Minimal OSRM table-service client.

Speaks the public table API: GET {base}/table/v1/driving/{lon,lat;lon,lat;...}
with ?annotations=duration and optional sources/destinations index lists.
Coordinates are snapped to a fixed number of decimals before querying so that
repeated lookups hit a process-local cache instead of the network.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np
import requests

from .geo import Point, RouterConfig

# OSRM deployments commonly cap table sizes around a few hundred coordinates;
# stay well below and chunk the destination axis.
MAX_TABLE_COORDS = 80


class OsrmError(RuntimeError):
    """Raised when the OSRM service cannot produce durations."""


class OsrmTableClient:
    def __init__(
        self,
        base_url: str,
        timeout_s: float = 5.0,
        snap_decimals: int = 4,
        max_concurrency: int = 4,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self.snap_decimals = snap_decimals
        self.max_concurrency = max(1, int(max_concurrency))
        self._session = session or requests.Session()
        self._cache: dict[tuple, float] = {}
        self._lock = threading.Lock()

    def _snap(self, p: Point) -> tuple[float, float]:
        return (round(p[0], self.snap_decimals), round(p[1], self.snap_decimals))

    def _fetch_table(
        self, coords: list[tuple[float, float]], sources: list[int], dests: list[int]
    ) -> np.ndarray:
        path = ";".join(f"{lon:.{self.snap_decimals}f},{lat:.{self.snap_decimals}f}" for lat, lon in coords)
        params = {
            "annotations": "duration",
            "sources": ";".join(str(i) for i in sources),
            "destinations": ";".join(str(i) for i in dests),
        }
        url = f"{self.base_url}/table/v1/driving/{path}"
        try:
            resp = self._session.get(url, params=params, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise OsrmError(f"osrm request failed: {exc}") from exc
        if resp.status_code != 200:
            raise OsrmError(f"osrm returned HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise OsrmError("osrm returned invalid JSON") from exc
        if body.get("code") != "Ok" or "durations" not in body:
            raise OsrmError(f"osrm error response: {body.get('code')!r}")
        mat = np.asarray(body["durations"], dtype=float)
        if mat.shape != (len(sources), len(dests)):
            raise OsrmError("osrm durations shape mismatch")
        if np.any(~np.isfinite(mat)):
            raise OsrmError("osrm returned null durations")
        return mat

    def durations(self, origins: Sequence[Point], dests: Sequence[Point]) -> np.ndarray:
        """Pairwise duration matrix in seconds (origins x dests)."""
        o_snap = [self._snap(p) for p in origins]
        d_snap = [self._snap(p) for p in dests]
        out = np.full((len(o_snap), len(d_snap)), np.nan)
        with self._lock:
            for i, a in enumerate(o_snap):
                for j, b in enumerate(d_snap):
                    hit = self._cache.get((a, b))
                    if hit is not None:
                        out[i, j] = hit
        miss_rows = sorted({i for i, j in zip(*np.nonzero(np.isnan(out)))})
        if miss_rows:
            self._fill_misses(o_snap, d_snap, out)
        return out

    def _fill_misses(self, o_snap, d_snap, out) -> None:
        uniq: list[tuple[float, float]] = []
        index: dict[tuple[float, float], int] = {}
        for p in o_snap + d_snap:
            if p not in index:
                index[p] = len(uniq)
                uniq.append(p)
        src_idx = sorted({index[p] for p in o_snap})
        dst_idx = sorted({index[p] for p in d_snap})

        chunks = [
            dst_idx[k : k + MAX_TABLE_COORDS] for k in range(0, len(dst_idx), MAX_TABLE_COORDS)
        ]

        def fetch(chunk):
            return chunk, self._fetch_table(uniq, src_idx, chunk)

        results = []
        if len(chunks) == 1:
            results.append(fetch(chunks[0]))
        else:
            with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
                results = list(pool.map(fetch, chunks))

        table: dict[tuple[int, int], float] = {}
        for chunk, mat in results:
            for a, gi in enumerate(src_idx):
                for b, gj in enumerate(chunk):
                    table[(gi, gj)] = float(mat[a, b])
        with self._lock:
            for i, a in enumerate(o_snap):
                for j, b in enumerate(d_snap):
                    if np.isnan(out[i, j]):
                        val = table[(index[a], index[b])]
                        out[i, j] = val
                        self._cache[(a, b)] = val

    def duration(self, a: Point, b: Point) -> float:
        return float(self.durations([a], [b])[0, 0])


_shared: dict[tuple, OsrmTableClient] = {}
_shared_lock = threading.Lock()


def shared_client(cfg: RouterConfig) -> OsrmTableClient:
    """Process-wide client per (base_url, snapping) so caches are reused."""
    if not cfg.osrm_base_url:
        raise OsrmError("router config has no osrm_base_url")
    key = (cfg.osrm_base_url, cfg.osrm_snap_decimals, cfg.osrm_timeout_s)
    with _shared_lock:
        cl = _shared.get(key)
        if cl is None:
            cl = OsrmTableClient(
                cfg.osrm_base_url,
                timeout_s=cfg.osrm_timeout_s,
                snap_decimals=cfg.osrm_snap_decimals,
                max_concurrency=cfg.osrm_max_concurrency,
            )
            _shared[key] = cl
        return cl
