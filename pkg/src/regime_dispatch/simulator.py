"""Discrete-time fleet simulator.

A fixed-step loop (default 30 s over a 4 h horizon) advances driver legs,
admits newly created requests, expires requests that waited too long,
matches waiting requests to available drivers, and (for calibrated
policies) periodically repositions idle drivers toward forecast demand.
Within a tick those phases always run in that order, so a pickup landing
exactly on the expiry boundary completes rather than expiring, and a
freshly released or just-arrived driver is dispatchable in the same tick.

Driver state moves on the step lattice: leg durations are rounded up to
whole steps. Request metrics keep raw (unrounded) seconds, which makes
wait_s <= max_wait_s + step_s a hard invariant rather than a tendency.

Policies:
  replay_greedy   nearest-free-driver matching every step
  replay_batch    optimal batch matching every batch window
  cal_only        replay_batch plus the calibrated prior (used for the
                  optional dispatch bias; identical to replay_batch with
                  the bias off)
  cal_heuristic   cal_only plus greedy repositioning every interval
  cal_lp          cal_only plus LP repositioning every interval

The only randomness is the initial fleet placement, drawn from the run
seed, so a (config, demand, prior) triple fully determines the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calibration import CalibratedPrior
from .dispatch import greedy_match, hungarian_match
from .geo import (
    BoundingBox,
    DEFAULT_BBOX,
    HexGrid,
    RouterConfig,
    travel_matrix,
    travel_time_s,
    zone_travel_matrix,
)
from .metrics import RequestOutcome, SimResult, summarize
from .reposition import (
    LpConfig,
    heuristic_reposition,
    solve_reposition_lp,
    zone_balances,
)

POLICIES = ("replay_greedy", "replay_batch", "cal_only", "cal_heuristic", "cal_lp")
CALIBRATED_POLICIES = ("cal_only", "cal_heuristic", "cal_lp")

IDLE = "idle"
TO_PICKUP = "to_pickup"
TO_DROPOFF = "to_dropoff"
REPOSITIONING = "repositioning"

Demand = Sequence[tuple[float, tuple[float, float], tuple[float, float]]]


@dataclass(frozen=True)
class SimConfig:
    policy: str = "replay_batch"
    seed: int = 42
    step_s: int = 30
    horizon_s: int = 14_400
    batch_window_s: int = 60
    max_wait_s: float = 600.0
    fleet_fraction: float = 0.15
    fleet_scale: float = 1.0
    zone_resolution: int = 8
    cal_dispatch_bias_s: float = 0.0
    router: RouterConfig = field(default_factory=RouterConfig)
    lp: LpConfig = field(default_factory=LpConfig)

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.step_s <= 0:
            raise ValueError("step_s must be positive")
        if self.horizon_s % self.step_s != 0:
            raise ValueError("horizon_s must be a multiple of step_s")
        if self.batch_window_s % self.step_s != 0:
            raise ValueError("batch_window_s must be a multiple of step_s")
        if self.max_wait_s <= 0:
            raise ValueError("max_wait_s must be positive")
        if self.fleet_fraction <= 0 or self.fleet_scale <= 0:
            raise ValueError("fleet sizing parameters must be positive")
        if self.cal_dispatch_bias_s < 0:
            raise ValueError("cal_dispatch_bias_s must be >= 0")


@dataclass
class _Driver:
    id: int
    position: tuple[float, float]
    status: str = IDLE
    leg_from: tuple[float, float] | None = None
    leg_to: tuple[float, float] | None = None
    leg_start_s: float = 0.0
    busy_until_s: float = 0.0
    arrive_raw_s: float = 0.0
    request_idx: int | None = None


@dataclass
class _Request:
    idx: int
    created_s: float
    pickup: tuple[float, float]
    dropoff: tuple[float, float]
    pickup_zone: int
    status: str = "open"  # open -> assigned -> onboard -> completed | expired
    driver_id: int | None = None
    matched_s: float | None = None
    pickup_s: float | None = None
    dropoff_s: float | None = None


@dataclass(frozen=True)
class SimOutput:
    metrics: SimResult
    outcomes: tuple[RequestOutcome, ...]
    counters: dict

    def to_json(self) -> str:
        import json

        return json.dumps(
            {
                "metrics": self.metrics.to_dict(),
                "counters": self.counters,
                "outcomes": [o.trace_row() for o in self.outcomes],
            },
            sort_keys=True,
        )


def fleet_size(n_requests: int, horizon_s: float, fraction: float, scale: float) -> int:
    """Drivers as a fraction of the mean hourly request rate, at least one."""
    rate_per_h = n_requests / (horizon_s / 3600.0)
    return max(1, round(fraction * rate_per_h * scale))


def init_fleet(
    n_requests: int, cfg: SimConfig, bbox: BoundingBox
) -> list[_Driver]:
    n = fleet_size(n_requests, cfg.horizon_s, cfg.fleet_fraction, cfg.fleet_scale)
    rng = np.random.default_rng(cfg.seed)
    lats = rng.uniform(bbox.lat_min, bbox.lat_max, size=n)
    lons = rng.uniform(bbox.lon_min, bbox.lon_max, size=n)
    return [
        _Driver(id=i, position=(float(lats[i]), float(lons[i]))) for i in range(n)
    ]


def _ceil_steps(seconds: float, step_s: int) -> float:
    return math.ceil(seconds / step_s - 1e-9) * step_s


def _position_at(d: _Driver, now_s: float) -> tuple[float, float]:
    if d.status == IDLE or d.leg_from is None or d.leg_to is None:
        return d.position
    span = d.busy_until_s - d.leg_start_s
    if span <= 0:
        return d.leg_to
    f = min(1.0, max(0.0, (now_s - d.leg_start_s) / span))
    return (
        d.leg_from[0] + f * (d.leg_to[0] - d.leg_from[0]),
        d.leg_from[1] + f * (d.leg_to[1] - d.leg_from[1]),
    )


class _Sim:
    def __init__(
        self,
        cfg: SimConfig,
        demand: Demand,
        prior: CalibratedPrior | None,
        bbox: BoundingBox,
        initial_positions: Sequence[tuple[float, float]] | None,
    ):
        if cfg.policy in CALIBRATED_POLICIES and prior is None:
            raise ValueError(f"policy {cfg.policy!r} requires a calibrated prior")
        self.cfg = cfg
        self.prior = prior
        self.bbox = bbox
        self.grid = HexGrid.for_bbox(bbox, cfg.zone_resolution)

        ordered = sorted(
            ((float(t), tuple(p), tuple(d)) for t, p, d in demand),
            key=lambda x: x[0],
        )
        if ordered:
            lats = np.array([r[1][0] for r in ordered])
            lons = np.array([r[1][1] for r in ordered])
            zones = self.grid.zones_of(lats, lons)
        else:
            zones = np.zeros(0, dtype=np.int64)
        self.requests = [
            _Request(
                idx=i,
                created_s=t,
                pickup=p,
                dropoff=dd,
                pickup_zone=int(z),
            )
            for i, ((t, p, dd), z) in enumerate(zip(ordered, zones))
        ]
        if initial_positions is not None:
            self.drivers = [
                _Driver(id=i, position=(float(a), float(b)))
                for i, (a, b) in enumerate(initial_positions)
            ]
        else:
            self.drivers = init_fleet(len(self.requests), cfg, bbox)
        self.pending: list[_Request] = []
        self._admit_ptr = 0
        self._bias_shares = self._pickup_zone_shares() if (
            prior is not None and cfg.cal_dispatch_bias_s > 0
        ) else None
        self.counters = {
            "n_drivers": len(self.drivers),
            "n_lp_solves": 0,
            "n_reposition_moves": 0,
            "n_clipped_moves": 0,
            "n_preemptions": 0,
            "n_batches": 0,
        }

    def _pickup_zone_shares(self) -> dict[int, float]:
        pickups = np.asarray([p for p, _ in self.prior.od_pool], dtype=float)
        zones = self.grid.zones_of(pickups[:, 0], pickups[:, 1])
        share: dict[int, float] = {}
        for z, w in zip(zones, self.prior.od_weights):
            share[int(z)] = share.get(int(z), 0.0) + float(w)
        peak = max(share.values()) if share else 0.0
        if peak <= 0:
            return {}
        return {z: s / peak for z, s in share.items()}

    # --- tick phases -------------------------------------------------

    def _advance(self, now: float) -> None:
        for d in self.drivers:
            if d.status == IDLE or d.busy_until_s > now:
                continue
            if d.status == TO_PICKUP:
                req = self.requests[d.request_idx]
                req.pickup_s = d.arrive_raw_s
                req.status = "onboard"
                self.pending.remove(req)
                d.position = req.pickup
                tau = travel_time_s(req.pickup, req.dropoff, self.cfg.router)
                d.status = TO_DROPOFF
                d.leg_from = req.pickup
                d.leg_to = req.dropoff
                d.leg_start_s = now
                d.busy_until_s = now + _ceil_steps(tau, self.cfg.step_s)
                d.arrive_raw_s = req.pickup_s + tau
            elif d.status == TO_DROPOFF:
                req = self.requests[d.request_idx]
                req.dropoff_s = d.arrive_raw_s
                req.status = "completed"
                d.position = req.dropoff
                d.status = IDLE
                d.leg_from = d.leg_to = None
                d.request_idx = None
            elif d.status == REPOSITIONING:
                d.position = d.leg_to
                d.status = IDLE
                d.leg_from = d.leg_to = None

    def _admit(self, now: float) -> None:
        while (
            self._admit_ptr < len(self.requests)
            and self.requests[self._admit_ptr].created_s <= now
        ):
            req = self.requests[self._admit_ptr]
            if req.created_s < self.cfg.horizon_s:
                self.pending.append(req)
            self._admit_ptr += 1

    def _expire(self, now: float) -> None:
        for req in list(self.pending):
            if now - req.created_s >= self.cfg.max_wait_s:
                if req.status == "assigned":
                    d = self.drivers[req.driver_id]
                    d.position = _position_at(d, now)
                    d.status = IDLE
                    d.leg_from = d.leg_to = None
                    d.request_idx = None
                req.status = "expired"
                self.pending.remove(req)

    def _eligible_drivers(self, now: float) -> list[_Driver]:
        return [d for d in self.drivers if d.status in (IDLE, REPOSITIONING)]

    def _dispatch(self, now: float) -> None:
        waiting = [r for r in self.pending if r.status == "open"]
        drivers = self._eligible_drivers(now)
        if not waiting or not drivers:
            return
        positions = [_position_at(d, now) for d in drivers]
        pickups = [r.pickup for r in waiting]
        cost = travel_matrix(pickups, positions, self.cfg.router)
        match_cost = cost
        if self._bias_shares:
            discount = np.array(
                [
                    self.cfg.cal_dispatch_bias_s
                    * self._bias_shares.get(r.pickup_zone, 0.0)
                    for r in waiting
                ]
            )
            match_cost = np.maximum(0.0, cost - discount[:, None])
        if self.cfg.policy == "replay_greedy":
            assignment = greedy_match(match_cost)
        else:
            assignment = hungarian_match(match_cost)
            self.counters["n_batches"] += 1
        for i, j in assignment.pairs:
            req = waiting[i]
            d = drivers[j]
            if d.status == REPOSITIONING:
                self.counters["n_preemptions"] += 1
            tau = float(cost[i, j])
            req.status = "assigned"
            req.driver_id = d.id
            req.matched_s = now
            d.status = TO_PICKUP
            d.request_idx = req.idx
            d.leg_from = positions[j]
            d.position = positions[j]
            d.leg_to = req.pickup
            d.leg_start_s = now
            d.busy_until_s = now + _ceil_steps(tau, self.cfg.step_s)
            d.arrive_raw_s = now + tau

    def _reposition(self, now: float) -> None:
        idle = [d for d in self.drivers if d.status == IDLE]
        if not idle:
            return
        balances = zone_balances(
            [d.position for d in idle],
            self.prior,
            now,
            self.cfg.lp.lookahead_min,
            self.grid,
        )
        if not balances:
            return
        zones = [b.zone for b in balances]
        cost = zone_travel_matrix(tuple(zones), self.cfg.router, self.grid)
        if self.cfg.policy == "cal_lp":
            plan = solve_reposition_lp(balances, cost, self.cfg.lp, len(idle))
            self.counters["n_lp_solves"] += 1
        else:
            plan = heuristic_reposition(balances, cost, self.cfg.lp, len(idle))
        if not plan.moves:
            return
        by_zone: dict[int, list[_Driver]] = {}
        for d in idle:
            z = int(self.grid.zone_of(*d.position))
            by_zone.setdefault(z, []).append(d)
        for zone_from, zone_to, count in plan.moves:
            target = self.grid.centroid(zone_to)
            avail = by_zone.get(zone_from, [])
            avail.sort(
                key=lambda d: (
                    travel_time_s(d.position, target, self.cfg.router),
                    d.id,
                )
            )
            take = avail[:count]
            if len(take) < count:
                self.counters["n_clipped_moves"] += count - len(take)
            for d in take:
                tau = travel_time_s(d.position, target, self.cfg.router)
                d.status = REPOSITIONING
                d.leg_from = d.position
                d.leg_to = target
                d.leg_start_s = now
                d.busy_until_s = now + _ceil_steps(tau, self.cfg.step_s)
                d.arrive_raw_s = now + tau
                self.counters["n_reposition_moves"] += 1
            by_zone[zone_from] = avail[len(take) :]

    # --- main loop ----------------------------------------------------

    def run(self) -> SimOutput:
        cfg = self.cfg
        reposition_every = cfg.lp.interval_steps * cfg.step_s
        for now in range(0, cfg.horizon_s, cfg.step_s):
            self._advance(float(now))
            self._admit(float(now))
            self._expire(float(now))
            if cfg.policy == "replay_greedy" or now % cfg.batch_window_s == 0:
                self._dispatch(float(now))
            if (
                cfg.policy in ("cal_heuristic", "cal_lp")
                and now % reposition_every == 0
            ):
                self._reposition(float(now))

        outcomes = []
        for req in self.requests:
            if req.status == "completed":
                status = "completed"
                wait = req.pickup_s - req.created_s
            elif req.status == "expired":
                status = "expired"
                wait = None
            else:
                status = "open"
                wait = None
            outcomes.append(
                RequestOutcome(
                    request_id=req.idx,
                    created_s=req.created_s,
                    status=status,
                    wait_s=wait,
                    matched_s=req.matched_s,
                    pickup_s=req.pickup_s,
                    dropoff_s=req.dropoff_s,
                    pickup_zone=req.pickup_zone,
                )
            )
        return SimOutput(
            metrics=summarize(outcomes, float(cfg.horizon_s)),
            outcomes=tuple(outcomes),
            counters=dict(sorted(self.counters.items())),
        )


def run(
    cfg: SimConfig,
    demand: Demand,
    prior: CalibratedPrior | None = None,
    bbox: BoundingBox = DEFAULT_BBOX,
    initial_positions: Sequence[tuple[float, float]] | None = None,
) -> SimOutput:
    """Simulate one policy over one demand realization.

    demand is a list of (created_s, pickup, dropoff) with times relative to
    the start of the horizon. Calibrated policies require a prior. Passing
    initial_positions overrides the seeded fleet placement (fleet size
    included), which is mainly useful in tests.
    """
    return _Sim(cfg, demand, prior, bbox, initial_positions).run()
