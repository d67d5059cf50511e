"""Experiment orchestration: scenario x policy x seed grids.

An experiment spec (JSON file or dict) names a regime library (a file or a
seeded synthetic build), a set of scenarios, the policies and seeds to run,
and any simulator/router/LP overrides. Each grid cell simulates one policy
on one scenario under one seed and lands in
out/<experiment>/<scenario>/<policy>/<seed>.json with a JSONL trace beside
it; an aggregate.csv, a stats.json (base-vs-ours battery), and a
manifest.json tie the run together. Outputs contain no timestamps and all
randomness is seeded, so a rerun of an unchanged config is byte-identical.

Scenario demand comes in two flavors: "synthetic:<profile>" replays a
held-out generated truth block (exact timestamps), and "block:<block_id>"
replays a library block with request times evenly spaced within each bin
(bin counts and OD pairs are what blocks store). The truth block is always
excluded from matching, so priors are built from genuinely other regimes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import synth
from .calibration import CalibratedPrior, build_prior, consistency_check
from .geo import BoundingBox, DEFAULT_BBOX, RouterConfig
from .ingestion import RegimeBlock, RegimeLibrary, load_library
from .reposition import LpConfig
from .similarity import (
    QueryContext,
    SimilarityWeights,
    WEIGHT_PRESETS,
    top_k,
)
from .simulator import POLICIES, SimConfig, SimOutput, run
from .stats import StatReport, build_stat_report

DEFAULT_SEEDS = (42, 142, 242, 342, 442)
SENSITIVITY_SEEDS = (42, 123, 456)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    demand: str  # "synthetic:<profile>" or "block:<block_id>"
    truth_index: int = 0

    def __post_init__(self) -> None:
        kind = self.demand.split(":", 1)[0]
        if kind not in ("synthetic", "block") or ":" not in self.demand:
            raise ValueError(f"demand must be synthetic:<name> or block:<id>, got {self.demand!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    library_path: str | None = None
    synthetic_blocks: int = 30
    synthetic_seed: int = 7
    scenarios: tuple[ScenarioSpec, ...] = ()
    policies: tuple[str, ...] = ("replay_greedy", "replay_batch", "cal_only", "cal_lp")
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    top_k: int = 5
    weights: str = "default"
    od_weighting: str = "by_source"
    base_policy: str = "replay_batch"
    ours_policy: str = "cal_lp"
    bbox: BoundingBox = DEFAULT_BBOX
    sim: SimConfig = field(default_factory=SimConfig)
    profile_overrides: tuple[tuple[str, tuple[tuple[str, float], ...]], ...] = ()
    write_traces: bool = True
    workers: int = 1

    def __post_init__(self) -> None:
        for p in self.policies:
            if p not in POLICIES:
                raise ValueError(f"unknown policy {p!r}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.weights not in WEIGHT_PRESETS:
            raise ValueError(f"unknown weights preset {self.weights!r}")

    def weight_obj(self) -> SimilarityWeights:
        return WEIGHT_PRESETS[self.weights]()

    def to_config_dict(self) -> dict:
        r = self.sim.router
        lp = self.sim.lp
        return {
            "name": self.name,
            "library": (
                {"path": self.library_path}
                if self.library_path
                else {
                    "synthetic": {
                        "blocks_per_profile": self.synthetic_blocks,
                        "seed": self.synthetic_seed,
                    }
                }
            ),
            "bbox": [self.bbox.lat_min, self.bbox.lat_max, self.bbox.lon_min, self.bbox.lon_max],
            "scenarios": [
                {"name": s.name, "demand": s.demand, "truth_index": s.truth_index}
                for s in self.scenarios
            ],
            "policies": list(self.policies),
            "seeds": list(self.seeds),
            "top_k": self.top_k,
            "weights": self.weights,
            "od_weighting": self.od_weighting,
            "base_policy": self.base_policy,
            "ours_policy": self.ours_policy,
            "sim": {
                "step_s": self.sim.step_s,
                "horizon_s": self.sim.horizon_s,
                "batch_window_s": self.sim.batch_window_s,
                "max_wait_s": self.sim.max_wait_s,
                "fleet_fraction": self.sim.fleet_fraction,
                "fleet_scale": self.sim.fleet_scale,
                "zone_resolution": self.sim.zone_resolution,
                "cal_dispatch_bias_s": self.sim.cal_dispatch_bias_s,
            },
            "router": {
                "kind": r.kind,
                "speed_kmh": r.speed_kmh,
                "scale_factor": r.scale_factor,
                "osrm_base_url": r.osrm_base_url,
                "osrm_fallback": r.osrm_fallback,
            },
            "lp": {
                "move_fraction": lp.move_fraction,
                "lookahead_min": lp.lookahead_min,
                "interval_steps": lp.interval_steps,
            },
            "profiles": {
                name: dict(kv) for name, kv in self.profile_overrides
            },
            "write_traces": self.write_traces,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_config_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def spec_from_dict(obj: Mapping) -> ExperimentSpec:
    """Build a spec from a parsed JSON config."""
    lib = obj.get("library", {})
    sim_kw = dict(obj.get("sim", {}))
    router_kw = dict(obj.get("router", {}))
    lp_kw = dict(obj.get("lp", {}))
    bbox_v = obj.get("bbox")
    bbox = BoundingBox(*bbox_v) if bbox_v else DEFAULT_BBOX
    router = RouterConfig(**router_kw) if router_kw else RouterConfig()
    lp = LpConfig(**lp_kw) if lp_kw else LpConfig()
    sim = SimConfig(router=router, lp=lp, **sim_kw)
    profiles = tuple(
        (name, tuple(sorted(kv.items())))
        for name, kv in sorted(obj.get("profiles", {}).items())
    )
    return ExperimentSpec(
        name=obj.get("name", "experiment"),
        library_path=lib.get("path"),
        synthetic_blocks=lib.get("synthetic", {}).get("blocks_per_profile", 30),
        synthetic_seed=lib.get("synthetic", {}).get("seed", 7),
        scenarios=tuple(
            ScenarioSpec(
                name=s["name"],
                demand=s["demand"],
                truth_index=s.get("truth_index", 0),
            )
            for s in obj.get("scenarios", ())
        ),
        policies=tuple(obj.get("policies", ("replay_greedy", "replay_batch", "cal_only", "cal_lp"))),
        seeds=tuple(obj.get("seeds", DEFAULT_SEEDS)),
        top_k=obj.get("top_k", 5),
        weights=obj.get("weights", "default"),
        od_weighting=obj.get("od_weighting", "by_source"),
        base_policy=obj.get("base_policy", "replay_batch"),
        ours_policy=obj.get("ours_policy", "cal_lp"),
        bbox=bbox,
        sim=sim,
        profile_overrides=profiles,
        write_traces=obj.get("write_traces", True),
        workers=obj.get("workers", 1),
    )


def load_spec(path) -> ExperimentSpec:
    with open(path) as fh:
        return spec_from_dict(json.load(fh))


@dataclass(frozen=True)
class PreparedScenario:
    name: str
    truth: RegimeBlock
    demand: tuple[tuple[float, tuple[float, float], tuple[float, float]], ...]
    prior: CalibratedPrior
    consistency_rho: float


def _profiles_for(spec: ExperimentSpec) -> tuple[synth.SyntheticProfile, ...]:
    overrides = {name: dict(kv) for name, kv in spec.profile_overrides}
    return synth.scaled_profiles(synth.default_profiles(), overrides)


def build_library(spec: ExperimentSpec) -> RegimeLibrary:
    if spec.library_path:
        return load_library(spec.library_path)
    return synth.generate_synthetic_library(
        blocks_per_profile=spec.synthetic_blocks,
        seed=spec.synthetic_seed,
        bbox=spec.bbox,
        profiles=_profiles_for(spec),
    )


def block_replay_demand(
    block: RegimeBlock, bin_s: float
) -> tuple[tuple[float, tuple[float, float], tuple[float, float]], ...]:
    """Reconstruct request times from a block: even spacing within each bin."""
    out = []
    k = 0
    for t, count in enumerate(block.demand_series):
        for j in range(count):
            created = t * bin_s + (j + 0.5) * bin_s / count
            p, d = block.od_pool[k]
            out.append((created, p, d))
            k += 1
    return tuple(out)


def prepare_scenario(
    scen: ScenarioSpec, spec: ExperimentSpec, lib: RegimeLibrary
) -> PreparedScenario:
    kind, _, arg = scen.demand.partition(":")
    if kind == "synthetic":
        profiles = {p.name: p for p in _profiles_for(spec)}
        if arg not in profiles:
            raise KeyError(f"no synthetic profile {arg!r}")
        truth, trips = synth.truth_block(
            profiles[arg],
            truth_index=scen.truth_index,
            seed=spec.synthetic_seed,
            bbox=spec.bbox,
        )
        demand = tuple(
            (trip.pickup_time_s - truth.start_s, trip.pickup, trip.dropoff)
            for trip in trips
        )
    else:
        truth = lib.get(arg)
        demand = block_replay_demand(truth, lib.build_config.bin_s)

    qc = QueryContext.from_block(truth)
    matches = top_k(
        qc,
        lib,
        weights=spec.weight_obj(),
        k=spec.top_k,
        exclude={truth.block_id},
    )
    prior = build_prior(
        matches,
        lib,
        target_volume=truth.total_demand,
        od_weighting=spec.od_weighting,
    )
    report = consistency_check(lib, truth, weights=spec.weight_obj())
    return PreparedScenario(
        name=scen.name,
        truth=truth,
        demand=demand,
        prior=prior,
        consistency_rho=report.rho,
    )


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _run_cell(args) -> tuple[str, str, int, dict]:
    scen_name, policy, seed, cfg, demand, prior, bbox, out_dir, write_traces = args
    out = run(cfg, demand, prior=prior, bbox=bbox)
    cell_dir = Path(out_dir) / scen_name / policy
    cell_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "scenario": scen_name,
        "policy": policy,
        "seed": seed,
        "metrics": out.metrics.to_dict(),
        "counters": out.counters,
    }
    _atomic_write(
        cell_dir / f"{seed}.json", json.dumps(payload, sort_keys=True, indent=1)
    )
    if write_traces:
        rows = "\n".join(json.dumps(o.trace_row(), sort_keys=True) for o in out.outcomes)
        _atomic_write(cell_dir / f"{seed}.trace.jsonl", rows + ("\n" if rows else ""))
    return scen_name, policy, seed, payload["metrics"]


def improvement_composition(
    waits: Mapping[str, Mapping[str, Mapping[int, float]]],
    base_policy: str,
    ours_policy: str,
    greedy_policy: str = "replay_greedy",
) -> dict | None:
    """Stage-wise improvement decomposition over the policy hierarchy.

    Per scenario, stage_a is the gain of the base (batched) policy over
    greedy replay, stage_b the gain of ours over the base, and compound the
    gain of ours over greedy. Stages are averaged across scenarios, so the
    multiplicative prediction 1 - (1 - a)(1 - b) is a genuine estimate of
    the measured compound rather than an identity; the gap between them is
    what the acceptance battery checks. Returns None unless all three
    policies ran on every scenario.
    """
    if not {greedy_policy, base_policy, ours_policy} <= set(waits):
        return None
    scenarios = sorted(waits[base_policy])
    if not scenarios or any(
        s not in waits[p] for p in (greedy_policy, ours_policy) for s in scenarios
    ):
        return None

    def seed_mean(policy: str, scen: str) -> float:
        vals = waits[policy][scen]
        return float(np.mean([vals[k] for k in sorted(vals)]))

    a_s, b_s, c_s = [], [], []
    for scen in scenarios:
        greedy = seed_mean(greedy_policy, scen)
        base = seed_mean(base_policy, scen)
        ours = seed_mean(ours_policy, scen)
        if greedy <= 0 or base <= 0:
            return None
        a_s.append(1.0 - base / greedy)
        b_s.append(1.0 - ours / base)
        c_s.append(1.0 - ours / greedy)
    a = float(np.mean(a_s))
    b = float(np.mean(b_s))
    compound = float(np.mean(c_s))
    predicted = 1.0 - (1.0 - a) * (1.0 - b)
    return {
        "stage_a_batching": a,
        "stage_b_calibrated_repositioning": b,
        "compound_measured": compound,
        "compound_predicted": predicted,
        "decomposition_gap": abs(predicted - compound),
        "per_scenario": {
            scen: {"stage_a": sa, "stage_b": sb, "compound": sc}
            for scen, sa, sb, sc in zip(scenarios, a_s, b_s, c_s)
        },
    }


AGGREGATE_FIELDS = (
    "scenario",
    "policy",
    "seed",
    "mean_wait_s",
    "p50_wait_s",
    "p95_wait_s",
    "p99_wait_s",
    "completion_rate",
    "gini_wait",
    "throughput_per_h",
    "n_created",
    "n_completed",
    "n_expired",
    "n_open",
)


@dataclass(frozen=True)
class ExperimentResult:
    out_dir: Path
    manifest: dict
    rows: tuple[dict, ...]
    stat_report: StatReport | None
    failures: dict

    @property
    def ok(self) -> bool:
        return not self.failures


def _git_rev() -> str | None:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True,
            text=True,
            timeout=10,
            check=True,
        ).stdout.strip()
        return rev or None
    except (OSError, subprocess.SubprocessError):
        return None


def run_experiment(
    spec: ExperimentSpec, out_root, workers: int | None = None
) -> ExperimentResult:
    """Run the whole grid and write per-run, aggregate, stats, manifest files.

    Cell failures are recorded in the manifest and do not stop other cells.
    """
    if not spec.scenarios:
        raise ValueError("experiment has no scenarios")
    out_dir = Path(out_root) / spec.name
    out_dir.mkdir(parents=True, exist_ok=True)
    lib = build_library(spec)

    prepared: list[PreparedScenario] = []
    failures: dict[str, str] = {}
    for scen in spec.scenarios:
        try:
            prepared.append(prepare_scenario(scen, spec, lib))
        except Exception as exc:
            failures[f"scenario:{scen.name}"] = repr(exc)

    jobs = []
    for ps in prepared:
        for policy in spec.policies:
            for seed in spec.seeds:
                cfg = replace(spec.sim, policy=policy, seed=seed)
                jobs.append(
                    (
                        ps.name,
                        policy,
                        seed,
                        cfg,
                        ps.demand,
                        ps.prior,
                        spec.bbox,
                        str(out_dir),
                        spec.write_traces,
                    )
                )

    n_workers = workers if workers is not None else spec.workers
    results = []
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = {pool.submit(_run_cell, j): j for j in jobs}
            for fut, job in futures.items():
                key = f"{job[0]}/{job[1]}/{job[2]}"
                try:
                    results.append(fut.result())
                except Exception as exc:
                    failures[key] = repr(exc)
    else:
        for job in jobs:
            key = f"{job[0]}/{job[1]}/{job[2]}"
            try:
                results.append(_run_cell(job))
            except Exception as exc:
                failures[key] = repr(exc)

    rows = []
    for scen_name, policy, seed, metrics in sorted(results, key=lambda r: (r[0], r[1], r[2])):
        row = {"scenario": scen_name, "policy": policy, "seed": seed}
        row.update({k: metrics[k] for k in AGGREGATE_FIELDS if k in metrics})
        rows.append(row)
    with open(out_dir / "aggregate.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=AGGREGATE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)

    report = None
    have = {p for _, p, _, _ in results}
    if spec.base_policy in have and spec.ours_policy in have:
        waits: dict[str, dict[str, dict[int, float]]] = {}
        for scen_name, policy, seed, metrics in results:
            waits.setdefault(policy, {}).setdefault(scen_name, {})[seed] = metrics[
                "mean_wait_s"
            ]
        rank = [p for p in spec.policies if p in have]
        report = build_stat_report(
            waits,
            spec.base_policy,
            spec.ours_policy,
            rank_policies=rank if len(rank) >= 3 else None,
        )
        doc = json.loads(report.to_json())
        composition = improvement_composition(
            waits, spec.base_policy, spec.ours_policy
        )
        if composition is not None:
            doc["composition"] = composition
        _atomic_write(
            out_dir / "stats.json", json.dumps(doc, sort_keys=True, indent=1)
        )

    manifest = {
        "experiment": spec.name,
        "config": spec.to_config_dict(),
        "config_hash": spec.config_hash(),
        "git_rev": _git_rev(),
        "zoning_backend": "axial-hex",
        "library_blocks": len(lib),
        "scenarios": {
            ps.name: {
                "truth_block": ps.truth.block_id,
                "n_requests": len(ps.demand),
                "prior_sources": list(ps.prior.source_ids),
                "consistency_rho": ps.consistency_rho,
            }
            for ps in prepared
        },
        "n_cells": len(jobs),
        "n_completed_cells": len(results),
        "failures": dict(sorted(failures.items())),
    }
    _atomic_write(out_dir / "manifest.json", json.dumps(manifest, sort_keys=True, indent=1))

    return ExperimentResult(
        out_dir=out_dir,
        manifest=manifest,
        rows=tuple(rows),
        stat_report=report,
        failures=failures,
    )


ABLATION_AXES = ("fleet_scale", "batch_window_s", "top_k", "weights", "reposition")


def _apply_axis(spec: ExperimentSpec, axis: str, value) -> ExperimentSpec:
    if axis == "fleet_scale":
        return replace(spec, sim=replace(spec.sim, fleet_scale=float(value)))
    if axis == "batch_window_s":
        return replace(spec, sim=replace(spec.sim, batch_window_s=int(value)))
    if axis == "top_k":
        return replace(spec, top_k=int(value))
    if axis == "weights":
        return replace(spec, weights=str(value))
    if axis == "reposition":
        frac, _, look = str(value).partition(":")
        lp = replace(
            spec.sim.lp, move_fraction=float(frac), lookahead_min=float(look)
        )
        return replace(spec, sim=replace(spec.sim, lp=lp))
    raise ValueError(f"unknown ablation axis {axis!r}")


def ablate(
    spec: ExperimentSpec, axis: str, values: Sequence, out_root, workers: int | None = None
) -> Path:
    """Sweep one knob, running a sub-experiment per value; writes sweep.csv."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {ABLATION_AXES}")
    root = Path(out_root) / spec.name / f"ablate_{axis}"
    root.mkdir(parents=True, exist_ok=True)
    long_rows = []
    failures = {}
    for value in values:
        sub = _apply_axis(spec, axis, value)
        sub = replace(sub, name=f"{axis}={value}")
        result = run_experiment(sub, root, workers=workers)
        failures.update(
            {f"{axis}={value}/{k}": v for k, v in result.failures.items()}
        )
        for row in result.rows:
            long_rows.append({"axis": axis, "value": value, **row})
    with open(root / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("axis", "value", *AGGREGATE_FIELDS))
        writer.writeheader()
        writer.writerows(long_rows)
    _atomic_write(
        root / "manifest.json",
        json.dumps(
            {
                "axis": axis,
                "values": [str(v) for v in values],
                "base_config_hash": spec.config_hash(),
                "failures": dict(sorted(failures.items())),
            },
            sort_keys=True,
            indent=1,
        ),
    )
    return root


def default_scenarios() -> tuple[ScenarioSpec, ...]:
    """The standard six held-out evaluation scenarios."""
    return (
        ScenarioSpec(name="rush_0", demand="synthetic:rush", truth_index=0),
        ScenarioSpec(name="rush_1", demand="synthetic:rush", truth_index=1),
        ScenarioSpec(name="flat_0", demand="synthetic:flat", truth_index=0),
        ScenarioSpec(name="surge_0", demand="synthetic:surge", truth_index=0),
        ScenarioSpec(name="night_0", demand="synthetic:night", truth_index=0),
        ScenarioSpec(name="night_1", demand="synthetic:night", truth_index=1),
    )


def default_spec(name: str = "main") -> ExperimentSpec:
    return ExperimentSpec(
        name=name, scenarios=default_scenarios(), bbox=synth.SYNTH_BBOX
    )
