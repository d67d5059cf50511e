"""Per-run service metrics.

A simulation produces one outcome record per request; this module reduces
them to the run-level result: wait-time distribution statistics (completed
requests only), completion counts, a Gini coefficient of waits as the
fairness measure, and throughput. Percentiles use linear interpolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class RequestOutcome:
    request_id: int
    created_s: float
    status: str  # completed | expired | open
    wait_s: float | None = None
    matched_s: float | None = None
    pickup_s: float | None = None
    dropoff_s: float | None = None
    pickup_zone: int | None = None

    def __post_init__(self) -> None:
        if self.status not in ("completed", "expired", "open"):
            raise ValueError(f"unknown outcome status {self.status!r}")
        if self.status == "completed" and self.wait_s is None:
            raise ValueError("completed outcome requires wait_s")

    def trace_row(self) -> dict:
        return {
            "request_id": self.request_id,
            "created_s": self.created_s,
            "wait_s": self.wait_s,
            "status": self.status,
            "pickup_zone": self.pickup_zone,
        }


@dataclass(frozen=True)
class SimResult:
    waits_s: tuple[float, ...]
    n_created: int
    n_completed: int
    n_expired: int
    n_open: int
    horizon_s: float
    mean_wait_s: float = field(init=False)
    p50_wait_s: float = field(init=False)
    p95_wait_s: float = field(init=False)
    p99_wait_s: float = field(init=False)
    completion_rate: float = field(init=False)
    gini_wait: float = field(init=False)
    throughput_per_h: float = field(init=False)

    def __post_init__(self) -> None:
        if self.n_created != self.n_completed + self.n_expired + self.n_open:
            raise ValueError("outcome counts must sum to n_created")
        if len(self.waits_s) != self.n_completed:
            raise ValueError("one wait per completed request expected")
        w = np.asarray(self.waits_s, dtype=float)
        if w.size:
            p50, p95, p99 = (float(v) for v in np.percentile(w, [50, 95, 99]))
            mean = float(w.mean())
        else:
            mean = p50 = p95 = p99 = 0.0
        object.__setattr__(self, "mean_wait_s", mean)
        object.__setattr__(self, "p50_wait_s", p50)
        object.__setattr__(self, "p95_wait_s", p95)
        object.__setattr__(self, "p99_wait_s", p99)
        object.__setattr__(
            self,
            "completion_rate",
            self.n_completed / self.n_created if self.n_created else 0.0,
        )
        object.__setattr__(self, "gini_wait", gini(w))
        object.__setattr__(
            self, "throughput_per_h", self.n_completed / (self.horizon_s / 3600.0)
        )

    def to_dict(self) -> dict:
        return {
            "n_created": self.n_created,
            "n_completed": self.n_completed,
            "n_expired": self.n_expired,
            "n_open": self.n_open,
            "horizon_s": self.horizon_s,
            "mean_wait_s": self.mean_wait_s,
            "p50_wait_s": self.p50_wait_s,
            "p95_wait_s": self.p95_wait_s,
            "p99_wait_s": self.p99_wait_s,
            "completion_rate": self.completion_rate,
            "gini_wait": self.gini_wait,
            "throughput_per_h": self.throughput_per_h,
            "waits_s": list(self.waits_s),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def gini(values) -> float:
    """Mean absolute pairwise difference over twice the mean.

    0 for fewer than two values or a zero mean. Computed by the sorted
    rank-weighted identity, which equals the O(n^2) pairwise definition.
    """
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    if n < 2:
        return 0.0
    mu = float(x.mean())
    if mu <= 0.0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float(np.sum((2 * ranks - n - 1) * x) / (n * n * mu))


def summarize(outcomes: Sequence[RequestOutcome], horizon_s: float) -> SimResult:
    """Reduce per-request outcomes to a SimResult."""
    waits = tuple(
        float(o.wait_s) for o in outcomes if o.status == "completed"
    )
    return SimResult(
        waits_s=waits,
        n_created=len(outcomes),
        n_completed=sum(1 for o in outcomes if o.status == "completed"),
        n_expired=sum(1 for o in outcomes if o.status == "expired"),
        n_open=sum(1 for o in outcomes if o.status == "open"),
        horizon_s=horizon_s,
    )
