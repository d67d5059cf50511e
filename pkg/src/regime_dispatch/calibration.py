"""Calibrated demand priors from matched regime records.

The rate profile is a similarity-weighted average of the matched records'
demand series, rescaled so its total matches a target volume. OD structure
is pooled from the matched records, each pair tagged with its source weight
(or uniformly, if configured). A prior can be sampled into a concrete
request set (per-bin Poisson counts, uniform times within a bin, weighted
OD draws), and a library can be scored for retrieval consistency: does the
ensemble similarity actually rank low-error records first?
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats as sstats

from .ingestion import RegimeBlock, RegimeLibrary
from .similarity import MatchResult, SimilarityWeights, DEFAULT_WEIGHTS, QueryContext, ensemble_score, library_feature_scale


@dataclass(frozen=True)
class CalibratedPrior:
    rate_profile: tuple[float, ...]
    od_pool: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    od_weights: tuple[float, ...]
    weights: tuple[float, ...]
    source_ids: tuple[str, ...]
    target_volume: float
    bin_s: float

    def __post_init__(self) -> None:
        if len(self.od_pool) != len(self.od_weights):
            raise ValueError("od_pool and od_weights must align")
        if len(self.weights) != len(self.source_ids):
            raise ValueError("weights and source_ids must align")

    def rate_array(self) -> np.ndarray:
        return np.asarray(self.rate_profile, dtype=float)

    @property
    def total_rate(self) -> float:
        return float(np.sum(self.rate_profile))


def combine_profiles(series_list: Sequence[np.ndarray], scores: Sequence[float]) -> np.ndarray:
    """Score-weighted average of demand series: alpha_i = s_i / sum_j s_j.

    Zero-score entries are dropped; if every score is zero the average falls
    back to uniform weights over all entries.
    """
    if len(series_list) == 0:
        raise ValueError("need at least one series")
    if len(series_list) != len(scores):
        raise ValueError("series and scores must align")
    s = np.asarray(scores, dtype=float)
    if np.any(s < 0):
        raise ValueError("scores must be non-negative")
    mat = np.stack([np.asarray(x, dtype=float) for x in series_list])
    if s.sum() == 0.0:
        alpha = np.full(len(s), 1.0 / len(s))
    else:
        keep = s > 0
        mat = mat[keep]
        alpha = s[keep] / s[keep].sum()
    return alpha @ mat


def normalized_weights(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.sum() == 0.0:
        return np.full(s.size, 1.0 / s.size)
    out = np.where(s > 0, s, 0.0)
    return out / out.sum()


def build_prior(
    matches: Sequence[MatchResult],
    lib: RegimeLibrary,
    target_volume: float,
    od_weighting: str = "by_source",
) -> CalibratedPrior:
    """Blend matched records into a rate profile and a weighted OD pool."""
    if not matches:
        raise ValueError("cannot build a prior from zero matches")
    if target_volume < 0:
        raise ValueError("target_volume must be >= 0")
    if od_weighting not in ("by_source", "uniform"):
        raise ValueError("od_weighting must be 'by_source' or 'uniform'")

    blocks = [lib.get(m.block_id) for m in matches]
    scores = [m.total_score for m in matches]
    alpha = normalized_weights(scores)

    profile = combine_profiles([b.series_array() for b in blocks], scores)
    total = float(profile.sum())
    if total > 0:
        profile = profile * (target_volume / total)

    pool: list[tuple[tuple[float, float], tuple[float, float]]] = []
    raw_w: list[float] = []
    for a, block in zip(alpha, blocks):
        for pair in block.od_pool:
            pool.append(pair)
            raw_w.append(1.0 if od_weighting == "uniform" else float(a))
    if not pool:
        raise ValueError("matched records have empty OD pools")
    w = np.asarray(raw_w, dtype=float)
    if w.sum() == 0.0:
        w = np.full(w.size, 1.0 / w.size)
    else:
        w = w / w.sum()

    return CalibratedPrior(
        rate_profile=tuple(float(v) for v in profile),
        od_pool=tuple(pool),
        od_weights=tuple(float(v) for v in w),
        weights=tuple(float(v) for v in alpha),
        source_ids=tuple(b.block_id for b in blocks),
        target_volume=float(target_volume),
        bin_s=lib.build_config.bin_s,
    )


def sample_requests(
    prior: CalibratedPrior, seed: int
) -> list[tuple[float, tuple[float, float], tuple[float, float]]]:
    """Draw one concrete demand realization from the prior.

    Per bin t: count ~ Poisson(rate[t]), each request at a uniform time
    within the bin with an OD pair drawn from the weighted pool. Output is
    sorted by request time. Fully determined by the seed.
    """
    rng = np.random.default_rng(seed)
    rates = prior.rate_array()
    weights = np.asarray(prior.od_weights)
    out: list[tuple[float, tuple[float, float], tuple[float, float]]] = []
    for t, lam in enumerate(rates):
        n = int(rng.poisson(max(0.0, lam)))
        if n == 0:
            continue
        times = np.sort(rng.uniform(0.0, prior.bin_s, size=n)) + t * prior.bin_s
        idx = rng.choice(len(prior.od_pool), size=n, p=weights)
        for time_s, j in zip(times, idx):
            pair = prior.od_pool[int(j)]
            out.append((float(time_s), pair[0], pair[1]))
    return out


def calibration_error(a, b) -> float:
    """L2 distance between two demand series of equal length."""
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape:
        raise ValueError("series must have identical shape")
    return float(np.linalg.norm(x - y))


def spearman_rho(x, y) -> float:
    """Spearman rank correlation with average ranks; 0 if either is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size:
        raise ValueError("inputs must align")
    if x.size < 2:
        raise ValueError("need at least two observations")
    rx = sstats.rankdata(x)
    ry = sstats.rankdata(y)
    sx = np.std(rx)
    sy = np.std(ry)
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))


def _spearman_p(rho: float, n: int, n_perm: int = 10_000, seed: int = 0) -> float:
    """Two-sided p for Spearman rho.

    t-approximation for n >= 30; below that, a seeded Monte Carlo
    permutation test (the approximation is unreliable at small n).
    """
    if n < 3:
        return 1.0
    if n >= 30:
        r2 = min(rho * rho, 1.0 - 1e-15)
        t = abs(rho) * np.sqrt((n - 2) / (1.0 - r2))
        return float(2.0 * sstats.t.sf(t, df=n - 2))
    rng = np.random.default_rng(seed)
    base = np.arange(n, dtype=float)
    hits = 0
    for _ in range(n_perm):
        perm = rng.permutation(n).astype(float)
        if abs(spearman_rho(base, perm)) >= abs(rho) - 1e-12:
            hits += 1
    return (1 + hits) / (n_perm + 1)


@dataclass(frozen=True)
class ConsistencyReport:
    rho: float
    p_value: float
    top5_error_ratio: float
    n_candidates: int

    def as_row(self) -> dict[str, float]:
        return {
            "rho": self.rho,
            "p_value": self.p_value,
            "top5_error_ratio": self.top5_error_ratio,
            "n_candidates": self.n_candidates,
        }


def consistency_check(
    lib: RegimeLibrary,
    truth: RegimeBlock,
    weights: SimilarityWeights = DEFAULT_WEIGHTS,
    k_top: int = 5,
) -> ConsistencyReport:
    """Do similarity scores rank low-forecast-error records first?

    Scores every candidate record (truth excluded) against the truth block,
    pairs each score with the L2 error between the candidate's series and
    the truth series, and reports Spearman rho between score and negated
    error, its p-value, and the mean error of the top-k matches relative to
    the median error of all candidates.
    """
    candidates = [r for r in lib.records if r.block_id != truth.block_id]
    if len(candidates) < 3:
        raise ValueError("need at least 3 candidate records")
    qc = QueryContext.from_block(truth)
    scale = library_feature_scale(lib)
    thr = lib.build_config.event_threshold
    win = lib.build_config.event_window
    scores = np.array(
        [
            ensemble_score(qc, r, weights, scale, thr, win).total_score
            for r in candidates
        ]
    )
    errors = np.array(
        [
            calibration_error(r.series_array(), truth.series_array())
            for r in candidates
        ]
    )
    rho = spearman_rho(scores, -errors)
    p = _spearman_p(rho, len(candidates))
    order = np.argsort(-scores, kind="stable")
    top = errors[order[:k_top]]
    med = float(np.median(errors))
    ratio = float(np.mean(top) / med) if med > 0 else float("inf") if np.mean(top) > 0 else 1.0
    return ConsistencyReport(
        rho=float(rho),
        p_value=float(p),
        top5_error_ratio=ratio,
        n_candidates=len(candidates),
    )
