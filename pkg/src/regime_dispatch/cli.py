"""Command-line interface.

Verbs: ingest, build-library, match, simulate, experiment, ablate, stats,
synth. Flags shared across verbs keep stable names so scripts can compose
them: --config, --seed, --seeds, --policy, --fleet-scale, --router,
--osrm-url, --out, --top-k, --batch-window.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments, synth
from .calibration import build_prior, consistency_check
from .geo import BoundingBox, DEFAULT_BBOX, RouterConfig
from .ingestion import (
    IngestConfig,
    load_library,
    parse_trips,
    save_library,
    segment_blocks,
)
from .similarity import QueryContext, WEIGHT_PRESETS, top_k
from .simulator import POLICIES, run
from .stats import build_stat_report


def _parse_bbox(text: str) -> BoundingBox:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("bbox must be latmin,latmax,lonmin,lonmax")
    return BoundingBox(*parts)


def _parse_seeds(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _router_from_args(args) -> RouterConfig:
    kw = {"kind": args.router}
    if args.osrm_url:
        kw["osrm_base_url"] = args.osrm_url
        kw["kind"] = "osrm" if args.router == "haversine" else args.router
    return RouterConfig(**kw)


def _add_router_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--router",
        choices=("haversine", "scaled", "osrm"),
        default="haversine",
        help="travel-time model",
    )
    p.add_argument("--osrm-url", default=None, help="OSRM base URL for --router osrm")


def _cmd_ingest(args) -> int:
    parsed = parse_trips(args.trips, bbox=args.bbox, fmt=args.format)
    s = parsed.summary
    print(
        f"read {s.rows_read} rows: kept {s.kept}, "
        f"malformed {s.skipped_malformed}, out-of-bbox {s.skipped_bbox}, "
        f"bad-time-order {s.skipped_time_order}"
    )
    if args.out:
        import csv as _csv
        from datetime import datetime, timezone

        from .ingestion import CSV_COLUMNS

        with open(args.out, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for t in parsed.trips:
                w.writerow(
                    [
                        datetime.fromtimestamp(t.pickup_time_s, tz=timezone.utc).isoformat(),
                        datetime.fromtimestamp(t.dropoff_time_s, tz=timezone.utc).isoformat(),
                        t.pickup_lat,
                        t.pickup_lon,
                        t.dropoff_lat,
                        t.dropoff_lon,
                    ]
                )
        print(f"wrote {len(parsed.trips)} normalized trips to {args.out}")
    return 0


def _cmd_build_library(args) -> int:
    parsed = parse_trips(args.trips, bbox=args.bbox, fmt=args.format)
    holidays = ()
    if args.holidays:
        holidays = tuple(
            line.strip()
            for line in Path(args.holidays).read_text().splitlines()
            if line.strip()
        )
    cfg = IngestConfig(
        bin_minutes=args.bin_minutes,
        block_hours=args.block_hours,
        bbox=args.bbox,
        event_threshold=args.event_threshold,
        event_window=args.event_window,
        holidays=holidays,
    )
    lib = segment_blocks(parsed.trips, cfg)
    save_library(lib, args.out)
    total = sum(b.total_demand for b in lib.records)
    print(f"library: {len(lib)} blocks, {total} trips -> {args.out}")
    return 0


def _cmd_synth(args) -> int:
    lib = synth.generate_synthetic_library(
        blocks_per_profile=args.blocks_per_profile,
        seed=args.seed,
        bbox=args.bbox,
    )
    save_library(lib, args.out)
    print(f"synthetic library: {len(lib)} blocks -> {args.out}")
    return 0


def _cmd_match(args) -> int:
    lib = load_library(args.library)
    truth = lib.get(args.block_id)
    qc = QueryContext.from_block(
        truth,
        mode="prefix" if args.prefix_bins else "full",
        prefix_bins=args.prefix_bins,
        event_threshold=lib.build_config.event_threshold,
        event_window=lib.build_config.event_window,
    )
    exclude = set() if args.include_self else {truth.block_id}
    matches = top_k(
        qc,
        lib,
        weights=WEIGHT_PRESETS[args.weights](),
        k=args.top_k,
        exclude=exclude,
    )
    lines = []
    for m in matches:
        lines.append(
            json.dumps(
                {
                    "block_id": m.block_id,
                    "total_score": m.total_score,
                    "components": m.components,
                    "effective_weights": m.effective_weights.as_dict(),
                },
                sort_keys=True,
            )
        )
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.consistency:
        rep = consistency_check(lib, truth, weights=WEIGHT_PRESETS[args.weights]())
        print(
            f"consistency: rho={rep.rho:.3f} p={rep.p_value:.2e} "
            f"top5-error-ratio={rep.top5_error_ratio:.3f} n={rep.n_candidates}"
        )
    return 0


def _cmd_simulate(args) -> int:
    lib = load_library(args.library)
    truth = lib.get(args.block_id)
    demand = experiments.block_replay_demand(truth, lib.build_config.bin_s)
    bbox = lib.build_config.bbox or DEFAULT_BBOX
    prior = None
    if args.policy in ("cal_only", "cal_heuristic", "cal_lp"):
        qc = QueryContext.from_block(truth)
        matches = top_k(qc, lib, k=args.top_k, exclude={truth.block_id})
        prior = build_prior(matches, lib, target_volume=truth.total_demand)
    cfg = replace(
        experiments.ExperimentSpec().sim,
        policy=args.policy,
        seed=args.seed,
        fleet_scale=args.fleet_scale,
        batch_window_s=args.batch_window,
        router=_router_from_args(args),
    )
    out = run(cfg, demand, prior=prior, bbox=bbox)
    blob = {
        "block_id": truth.block_id,
        "policy": args.policy,
        "seed": args.seed,
        "metrics": out.metrics.to_dict(),
        "counters": out.counters,
    }
    text = json.dumps(blob, sort_keys=True, indent=1)
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / f"{args.block_id}_{args.policy}_{args.seed}.json").write_text(text)
        with open(outdir / f"{args.block_id}_{args.policy}_{args.seed}.trace.jsonl", "w") as fh:
            for o in out.outcomes:
                fh.write(json.dumps(o.trace_row(), sort_keys=True) + "\n")
    print(text)
    return 0


def _spec_with_overrides(args) -> experiments.ExperimentSpec:
    spec = experiments.load_spec(args.config) if args.config else experiments.default_spec()
    if args.seeds:
        spec = replace(spec, seeds=args.seeds)
    if args.policy:
        spec = replace(spec, policies=tuple(args.policy))
    sim = spec.sim
    if args.fleet_scale is not None:
        sim = replace(sim, fleet_scale=args.fleet_scale)
    if args.batch_window is not None:
        sim = replace(sim, batch_window_s=args.batch_window)
    if args.router != "haversine" or args.osrm_url:
        sim = replace(sim, router=_router_from_args(args))
    spec = replace(spec, sim=sim)
    if args.top_k is not None:
        spec = replace(spec, top_k=args.top_k)
    return spec


def _cmd_experiment(args) -> int:
    spec = _spec_with_overrides(args)
    result = experiments.run_experiment(spec, args.out, workers=args.workers)
    print(f"{result.manifest['n_completed_cells']}/{result.manifest['n_cells']} cells -> {result.out_dir}")
    if result.stat_report is not None:
        print(result.stat_report.format_table())
    if not result.ok:
        for key, err in result.failures.items():
            print(f"FAILED {key}: {err}", file=sys.stderr)
        return 1
    return 0


def _cmd_ablate(args) -> int:
    spec = _spec_with_overrides(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    root = experiments.ablate(spec, args.axis, values, args.out, workers=args.workers)
    manifest = json.loads((root / "manifest.json").read_text())
    print(f"sweep over {args.axis}: {values} -> {root}")
    if manifest["failures"]:
        for key, err in manifest["failures"].items():
            print(f"FAILED {key}: {err}", file=sys.stderr)
        return 1
    return 0


def _cmd_stats(args) -> int:
    import csv as _csv

    waits: dict[str, dict[str, dict[int, float]]] = {}
    with open(Path(args.results) / "aggregate.csv") as fh:
        for row in _csv.DictReader(fh):
            waits.setdefault(row["policy"], {}).setdefault(row["scenario"], {})[
                int(row["seed"])
            ] = float(row["mean_wait_s"])
    policies = sorted(waits)
    report = build_stat_report(
        waits,
        args.base,
        args.ours,
        rank_policies=policies if len(policies) >= 3 else None,
    )
    out_path = Path(args.out) if args.out else Path(args.results) / "stats.json"
    out_path.write_text(report.to_json())
    print(report.format_table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regime-dispatch",
        description="Regime-calibrated dispatch: libraries, priors, simulation, experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and summarize raw trips")
    p.add_argument("--trips", required=True)
    p.add_argument("--format", choices=("csv", "parquet"), default="csv")
    p.add_argument("--bbox", type=_parse_bbox, default=DEFAULT_BBOX)
    p.add_argument("--out", default=None, help="write normalized CSV here")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("build-library", help="segment trips into a regime library")
    p.add_argument("--trips", required=True)
    p.add_argument("--format", choices=("csv", "parquet"), default="csv")
    p.add_argument("--bbox", type=_parse_bbox, default=DEFAULT_BBOX)
    p.add_argument("--bin-minutes", type=int, default=5)
    p.add_argument("--block-hours", type=int, default=4)
    p.add_argument("--event-threshold", type=float, default=3.0)
    p.add_argument("--event-window", type=int, default=12)
    p.add_argument("--holidays", default=None, help="file with one ISO date per line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_library)

    p = sub.add_parser("synth", help="generate a synthetic regime library")
    p.add_argument("--blocks-per-profile", type=int, default=30)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--bbox", type=_parse_bbox, default=DEFAULT_BBOX)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("match", help="top-k similar regimes with score breakdown")
    p.add_argument("--library", required=True)
    p.add_argument("--block-id", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--prefix-bins", type=int, default=None)
    p.add_argument("--weights", choices=sorted(WEIGHT_PRESETS), default="default")
    p.add_argument("--include-self", action="store_true")
    p.add_argument("--consistency", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("simulate", help="simulate one policy on one block")
    p.add_argument("--library", required=True)
    p.add_argument("--block-id", required=True)
    p.add_argument("--policy", choices=POLICIES, default="replay_batch")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--fleet-scale", type=float, default=1.0)
    p.add_argument("--batch-window", type=int, default=60)
    p.add_argument("--top-k", type=int, default=5)
    _add_router_flags(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_simulate)

    for verb, fn in (("experiment", _cmd_experiment), ("ablate", _cmd_ablate)):
        p = sub.add_parser(verb, help=f"run an {verb} grid")
        p.add_argument("--config", default=None, help="experiment JSON config")
        p.add_argument("--out", required=True)
        p.add_argument("--seeds", type=_parse_seeds, default=None)
        p.add_argument("--policy", action="append", choices=POLICIES, default=None)
        p.add_argument("--fleet-scale", type=float, default=None)
        p.add_argument("--batch-window", type=int, default=None)
        p.add_argument("--top-k", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        _add_router_flags(p)
        if verb == "ablate":
            p.add_argument("--axis", choices=experiments.ABLATION_AXES, required=True)
            p.add_argument("--values", required=True, help="comma-separated values")
        p.set_defaults(func=fn)

    p = sub.add_parser("stats", help="statistical battery over an aggregate.csv")
    p.add_argument("--results", required=True, help="experiment output directory")
    p.add_argument("--base", default="replay_batch")
    p.add_argument("--ours", default="cal_lp")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
