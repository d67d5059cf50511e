"""Six-metric similarity ensemble over demand regime blocks.

Each metric maps a (query, record) pair into [0, 1]; the ensemble score is
their weighted sum. Distributional metrics (KS complement, Wasserstein-1)
compare the multiset of per-bin demand counts; the feature metric compares
scaled summary-statistic vectors; the variance-ratio metric compares spread;
the event metric compares detected surge events; the temporal metric counts
calendar agreements. When exactly one side of a pair has surge events the
event weight is folded into the two distributional metrics instead of
letting an uninformative comparison dilute the score.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .ingestion import (
    BlockMeta,
    RegimeBlock,
    RegimeLibrary,
    SummaryFeatures,
    SurgeEvent,
    compute_features,
    detect_events,
)

METRIC_NAMES = ("ks", "w1", "feat", "var", "event", "temporal")

FEATURE_SCALE_EPS = 1e-9


class NoCandidatesError(ValueError):
    """Raised when matching is attempted against an empty candidate set."""


@dataclass(frozen=True)
class SimilarityWeights:
    ks: float = 0.20
    w1: float = 0.20
    feat: float = 0.15
    var: float = 0.10
    event: float = 0.20
    temporal: float = 0.15

    def __post_init__(self) -> None:
        vals = self.as_array()
        if np.any(vals < 0):
            raise ValueError("weights must be non-negative")
        if abs(float(vals.sum()) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.ks, self.w1, self.feat, self.var, self.event, self.temporal]
        )

    def as_dict(self) -> dict[str, float]:
        return dict(zip(METRIC_NAMES, self.as_array().tolist()))

    @classmethod
    def distributional_only(cls) -> "SimilarityWeights":
        """Event and temporal weights dropped, the rest renormalized."""
        kept = np.array([0.20, 0.20, 0.15, 0.10])
        kept = kept / kept.sum()
        return cls(
            ks=float(kept[0]),
            w1=float(kept[1]),
            feat=float(kept[2]),
            var=float(kept[3]),
            event=0.0,
            temporal=0.0,
        )


DEFAULT_WEIGHTS = SimilarityWeights()

WEIGHT_PRESETS = {
    "default": lambda: DEFAULT_WEIGHTS,
    "distributional_only": SimilarityWeights.distributional_only,
}


@dataclass(frozen=True)
class QueryContext:
    """What is known about the block being matched.

    In "full" mode the whole demand series is available; in "prefix" mode
    only the first len(series) bins have been observed, and library records
    are compared on the same prefix with their features and events
    recomputed on the truncated series.
    """

    series: tuple[float, ...]
    features: SummaryFeatures
    events: tuple[SurgeEvent, ...]
    metadata: BlockMeta
    mode: str = "full"

    def __post_init__(self) -> None:
        if self.mode not in ("full", "prefix"):
            raise ValueError("mode must be 'full' or 'prefix'")
        if len(self.series) == 0:
            raise ValueError("query series must be non-empty")

    @classmethod
    def from_block(
        cls,
        block: RegimeBlock,
        mode: str = "full",
        prefix_bins: int | None = None,
        event_threshold: float = 3.0,
        event_window: int = 12,
    ) -> "QueryContext":
        series = block.demand_series
        if mode == "prefix":
            n = prefix_bins if prefix_bins is not None else len(series)
            if not 1 <= n <= len(series):
                raise ValueError("prefix_bins out of range")
            series = series[:n]
            return cls(
                series=tuple(float(v) for v in series),
                features=compute_features(series),
                events=tuple(detect_events(series, event_threshold, event_window)),
                metadata=block.metadata,
                mode="prefix",
            )
        return cls(
            series=tuple(float(v) for v in series),
            features=block.features,
            events=block.events,
            metadata=block.metadata,
            mode="full",
        )


@dataclass(frozen=True)
class MatchResult:
    block_id: str
    total_score: float
    components: dict[str, float]
    effective_weights: SimilarityWeights


def _ecdf(sorted_vals: np.ndarray, at: np.ndarray) -> np.ndarray:
    return np.searchsorted(sorted_vals, at, side="right") / len(sorted_vals)


def sim_ks(q, r) -> float:
    """1 minus the two-sample KS statistic of the bin-value distributions."""
    q = np.sort(np.asarray(q, dtype=float))
    r = np.sort(np.asarray(r, dtype=float))
    if q.size == 0 or r.size == 0:
        raise ValueError("series must be non-empty")
    grid = np.concatenate([q, r])
    d = np.max(np.abs(_ecdf(q, grid) - _ecdf(r, grid)))
    return float(1.0 - d)


def wasserstein1(u, v) -> float:
    """Exact W1 between two empirical distributions (CDF-difference integral)."""
    us = np.sort(np.asarray(u, dtype=float))
    vs = np.sort(np.asarray(v, dtype=float))
    if us.size == 0 or vs.size == 0:
        raise ValueError("samples must be non-empty")
    allv = np.sort(np.concatenate([us, vs]))
    deltas = np.diff(allv)
    if deltas.size == 0 or float(deltas.sum()) == 0.0:
        return 0.0
    cu = _ecdf(us, allv[:-1])
    cv = _ecdf(vs, allv[:-1])
    return float(np.sum(np.abs(cu - cv) * deltas))


def sim_w1(q, r) -> float:
    """Range-normalized Wasserstein-1 similarity of bin-value distributions."""
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    w1 = wasserstein1(q, r)
    both = np.concatenate([q, r])
    rng = float(both.max() - both.min())
    if rng == 0.0:
        rng = 1.0
    return 1.0 / (1.0 + w1 / rng)


def sim_feat(fq: SummaryFeatures, fr: SummaryFeatures, scale=None) -> float:
    """Inverse-distance similarity of per-dimension scaled feature vectors."""
    vq = fq.as_vector()
    vr = fr.as_vector()
    if scale is None:
        s = np.ones(vq.size)
    else:
        s = np.maximum(np.asarray(scale, dtype=float), FEATURE_SCALE_EPS)
    d = float(np.linalg.norm((vq - vr) / s))
    return 1.0 / (1.0 + d)


def sim_var(sq: float, sr: float) -> float:
    """Ratio of smaller to larger std; both zero is a perfect match."""
    if sq < 0 or sr < 0:
        raise ValueError("standard deviations must be non-negative")
    if sq == 0.0 and sr == 0.0:
        return 1.0
    if sq == 0.0 or sr == 0.0:
        return 0.0
    return float(min(sq, sr) / max(sq, sr))


def sim_event(
    eq: Sequence[SurgeEvent], er: Sequence[SurgeEvent]
) -> float:
    """Similarity of surge-event sets.

    Four equally weighted terms: W1 similarity of peak intensities, W1
    similarity of durations, mean inverse distance between chronologically
    paired pre-surge feature vectors, and the event-count ratio. Two
    eventless blocks are perfectly similar; if exactly one side is eventless
    the comparison is uninformative and scores 0 (the ensemble gate
    reassigns its weight in that case).
    """
    nq, nr = len(eq), len(er)
    if nq == 0 and nr == 0:
        return 1.0
    if nq == 0 or nr == 0:
        return 0.0
    ints_q = [e.peak_intensity for e in eq]
    ints_r = [e.peak_intensity for e in er]
    durs_q = [float(e.duration_bins) for e in eq]
    durs_r = [float(e.duration_bins) for e in er]
    t_int = 1.0 / (1.0 + wasserstein1(ints_q, ints_r))
    t_dur = 1.0 / (1.0 + wasserstein1(durs_q, durs_r))
    m = min(nq, nr)
    pre = 0.0
    for a, b in zip(eq[:m], er[:m]):
        d = float(
            np.linalg.norm(
                np.asarray(a.pre_surge_features) - np.asarray(b.pre_surge_features)
            )
        )
        pre += 1.0 / (1.0 + d)
    t_pre = pre / m
    t_cnt = m / max(nq, nr)
    return 0.25 * (t_int + t_dur + t_pre + t_cnt)


def sim_temporal(mq: BlockMeta, mr: BlockMeta) -> float:
    """Fraction of matching calendar facets: month, day type, hour block."""
    hits = (
        int(mq.month == mr.month)
        + int(mq.day_type == mr.day_type)
        + int(mq.hour_block == mr.hour_block)
    )
    return hits / 3.0


def gate_weights(
    weights: SimilarityWeights, query_has_events: bool, record_has_events: bool
) -> SimilarityWeights:
    """Fold the event weight into ks/w1 when exactly one side is eventless."""
    if query_has_events == record_has_events or weights.event == 0.0:
        return weights
    half = weights.event / 2.0
    return replace(
        weights, ks=weights.ks + half, w1=weights.w1 + half, event=0.0
    )


def _record_view(
    qc: QueryContext,
    record: RegimeBlock,
    event_threshold: float,
    event_window: int,
):
    """Record series/features/events in the query's observation mode."""
    if qc.mode == "prefix":
        n = min(len(qc.series), len(record.demand_series))
        series = record.demand_series[:n]
        return (
            np.asarray(series, dtype=float),
            compute_features(series),
            tuple(detect_events(series, event_threshold, event_window)),
        )
    return (
        record.series_array(),
        record.features,
        record.events,
    )


def ensemble_score(
    qc: QueryContext,
    record: RegimeBlock,
    weights: SimilarityWeights = DEFAULT_WEIGHTS,
    feat_scale=None,
    event_threshold: float = 3.0,
    event_window: int = 12,
) -> MatchResult:
    """Weighted six-metric similarity between a query and one record."""
    r_series, r_features, r_events = _record_view(
        qc, record, event_threshold, event_window
    )
    q_series = np.asarray(qc.series, dtype=float)
    if qc.mode == "prefix":
        q_series = q_series[: r_series.size]

    components = {
        "ks": sim_ks(q_series, r_series),
        "w1": sim_w1(q_series, r_series),
        "feat": sim_feat(qc.features, r_features, feat_scale),
        "var": sim_var(qc.features.std, r_features.std),
        "event": sim_event(qc.events, r_events),
        "temporal": sim_temporal(qc.metadata, record.metadata),
    }
    eff = gate_weights(weights, len(qc.events) > 0, len(r_events) > 0)
    total = float(
        sum(eff.as_dict()[name] * components[name] for name in METRIC_NAMES)
    )
    return MatchResult(
        block_id=record.block_id,
        total_score=total,
        components=components,
        effective_weights=eff,
    )


def library_feature_scale(lib: RegimeLibrary) -> np.ndarray:
    """Per-dimension population std of feature vectors across the library."""
    if not lib.records:
        raise NoCandidatesError("no candidate regimes")
    mat = np.stack([r.features.as_vector() for r in lib.records])
    return np.maximum(np.std(mat, axis=0), FEATURE_SCALE_EPS)


def top_k(
    qc: QueryContext,
    lib: RegimeLibrary,
    weights: SimilarityWeights = DEFAULT_WEIGHTS,
    k: int = 5,
    exclude: frozenset[str] | set[str] = frozenset(),
) -> list[MatchResult]:
    """Best-k records by ensemble score; ties break on block id.

    Feature scaling uses library-wide per-dimension stds so no single
    feature dimension dominates the feature metric.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    candidates = [r for r in lib.records if r.block_id not in exclude]
    if not candidates:
        raise NoCandidatesError("no candidate regimes")
    scale = library_feature_scale(lib)
    thr = lib.build_config.event_threshold
    win = lib.build_config.event_window
    scored = [
        ensemble_score(qc, r, weights, scale, thr, win) for r in candidates
    ]
    scored.sort(key=lambda m: (-m.total_score, m.block_id))
    return scored[:k]
