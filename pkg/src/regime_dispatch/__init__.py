"""Regime-calibrated ride-hailing dispatch.

A pipeline in five stages: ingest trips into a library of 4-hour demand
regime blocks; retrieve the most similar historical regimes for a target
block with a six-metric ensemble; blend them into a calibrated demand
prior; reposition idle drivers toward forecast demand with a small
transportation LP; and dispatch waiting requests in optimal batches inside
a discrete-time fleet simulator. A statistics module provides the paired
nonparametric battery used to compare policies.
"""

from .geo import BoundingBox, DEFAULT_BBOX, HexGrid, RouterConfig, haversine_m, travel_time_s
from .ingestion import (
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
from .similarity import (
    DEFAULT_WEIGHTS,
    MatchResult,
    QueryContext,
    SimilarityWeights,
    ensemble_score,
    top_k,
)
from .calibration import (
    CalibratedPrior,
    ConsistencyReport,
    build_prior,
    calibration_error,
    consistency_check,
    sample_requests,
)
from .dispatch import Assignment, greedy_match, hungarian_match
from .reposition import (
    LpConfig,
    RepositionPlan,
    ZoneBalance,
    heuristic_reposition,
    solve_reposition_lp,
    unserved_bound_check,
    zone_balances,
)
from .simulator import POLICIES, SimConfig, SimOutput, run
from .metrics import RequestOutcome, SimResult, gini, summarize
from .stats import (
    FriedmanResult,
    StatReport,
    bonferroni,
    bootstrap_ci,
    build_stat_report,
    cohens_d,
    friedman_nemenyi,
    wilcoxon_signed_rank,
)
from .synth import GenerationError, SyntheticProfile, default_profiles, generate_synthetic_library, truth_block
from .experiments import (
    ExperimentSpec,
    ScenarioSpec,
    ablate,
    default_spec,
    load_spec,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
