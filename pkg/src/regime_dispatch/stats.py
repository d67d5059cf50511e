"""Paired statistical battery for policy comparisons.

Wilcoxon signed-rank with an exact null distribution at small n (computed
by dynamic programming over signed-rank sums, identical to full sign-flip
enumeration), Friedman's chi-square over blocked rankings, the Nemenyi
critical difference for post-hoc rank gaps, Cohen's d with a pooled std,
Bonferroni correction, and a hierarchical bootstrap CI that resamples
scenarios first and seeds within scenarios.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sstats

# Two-tailed alpha=0.05 studentized-range constants divided by sqrt(2),
# indexed by the number of compared policies (Demsar's post-hoc table).
NEMENYI_Q_05 = {
    2: 1.959964,
    3: 2.343701,
    4: 2.569032,
    5: 2.727774,
    6: 2.849705,
    7: 2.948319,
    8: 3.030879,
    9: 3.101730,
    10: 3.163684,
}


def wilcoxon_signed_rank(a, b, one_sided: bool = False) -> float:
    """P-value of the paired signed-rank test of a vs b.

    Zero differences are dropped; ties in |difference| get average ranks.
    One-sided tests H1: a > b (small p when b improves on a). n <= 20 uses
    the exact permutation null; larger n uses the tie-corrected normal
    approximation.
    """
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length 1-D sequences")
    d = x - y
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = sstats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= 20:
        return _wilcoxon_exact_p(ranks, w_plus, one_sided)
    mu = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(counts.astype(float) ** 3 - counts)) / 48.0
    sigma = np.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    z = (w_plus - mu) / sigma
    if one_sided:
        return float(sstats.norm.sf(z))
    return float(min(1.0, 2.0 * sstats.norm.sf(abs(z))))


def _wilcoxon_exact_p(ranks: np.ndarray, w_plus: float, one_sided: bool) -> float:
    """Exact tail probabilities of W+ under random sign flips.

    Ranks are doubled so average ranks become integers; the DP convolution
    over 2^n equiprobable sign patterns matches brute-force enumeration.
    """
    r2 = np.round(2.0 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=float)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    counts /= counts.sum()
    obs = int(round(2.0 * w_plus))
    p_ge = float(counts[obs:].sum())
    p_le = float(counts[: obs + 1].sum())
    if one_sided:
        return p_ge
    return float(min(1.0, 2.0 * min(p_ge, p_le)))


def bonferroni(p: float, m: int = 8) -> float:
    """Family-wise adjusted p-value: min(1, m * p)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return float(min(1.0, m * p))


@dataclass(frozen=True)
class FriedmanResult:
    chi2: float
    p_value: float
    mean_ranks: tuple[float, ...]
    critical_difference: float
    n_blocks: int
    n_treatments: int


def friedman_nemenyi(matrix) -> FriedmanResult:
    """Friedman chi-square plus the Nemenyi critical difference.

    matrix is n blocks x k treatments of a lower-is-better measure; rank 1
    within a block is the best treatment. Average ranks break ties.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise ValueError("matrix must be 2-D (blocks x treatments)")
    n, k = m.shape
    if k < 3:
        raise ValueError("need at least 3 treatments")
    if n < 2:
        raise ValueError("need at least 2 blocks")
    if k not in NEMENYI_Q_05:
        raise ValueError(f"no critical value tabulated for k={k}")
    ranks = np.apply_along_axis(sstats.rankdata, 1, m)
    mean_ranks = ranks.mean(axis=0)
    chi2 = float(
        12.0 * n / (k * (k + 1)) * np.sum((mean_ranks - (k + 1) / 2.0) ** 2)
    )
    p = float(sstats.chi2.sf(chi2, df=k - 1))
    cd = float(NEMENYI_Q_05[k] * np.sqrt(k * (k + 1) / (6.0 * n)))
    return FriedmanResult(
        chi2=chi2,
        p_value=p,
        mean_ranks=tuple(float(r) for r in mean_ranks),
        critical_difference=cd,
        n_blocks=n,
        n_treatments=k,
    )


def cohens_d(a, b) -> float:
    """Standardized mean difference with a pooled (n-1) std.

    Zero pooled spread degenerates to 0 for equal means and signed infinity
    otherwise.
    """
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.size < 2 or y.size < 2:
        raise ValueError("need at least 2 observations per group")
    nx, ny = x.size, y.size
    vx = float(np.var(x, ddof=1))
    vy = float(np.var(y, ddof=1))
    pooled = np.sqrt(((nx - 1) * vx + (ny - 1) * vy) / (nx + ny - 2))
    diff = float(x.mean() - y.mean())
    if pooled == 0.0:
        if diff == 0.0:
            return 0.0
        return float(np.inf) if diff > 0 else float(-np.inf)
    return diff / pooled


def bootstrap_ci(
    groups: Mapping[str, Sequence[float]],
    n_resamples: int = 10_000,
    seed: int = 0,
    alpha: float = 0.05,
) -> tuple[float, float]:
    """Hierarchical percentile bootstrap CI of the grand mean.

    groups maps scenario name to its per-seed values. Each resample draws
    scenarios with replacement, then seeds with replacement within each
    drawn scenario, and takes the mean of scenario means. Deterministic for
    a fixed seed.
    """
    names = sorted(groups)
    if not names:
        raise ValueError("need at least one group")
    data = [np.asarray(groups[g], dtype=float) for g in names]
    if any(d.size == 0 for d in data):
        raise ValueError("groups must be non-empty")
    rng = np.random.default_rng(seed)
    n_g = len(data)
    stats = np.empty(n_resamples)
    for i in range(n_resamples):
        chosen = rng.integers(0, n_g, size=n_g)
        means = [
            float(np.mean(rng.choice(data[g], size=data[g].size, replace=True)))
            for g in chosen
        ]
        stats[i] = float(np.mean(means))
    lo, hi = np.percentile(stats, [100 * alpha / 2.0, 100 * (1 - alpha / 2.0)])
    return float(lo), float(hi)


@dataclass(frozen=True)
class ScenarioComparison:
    scenario: str
    base_mean_wait_s: float
    ours_mean_wait_s: float
    improvement: float  # relative, (base - ours) / base
    ci_low: float
    ci_high: float
    p_raw: float
    p_adjusted: float
    effect_size_d: float


@dataclass(frozen=True)
class StatReport:
    base_policy: str
    ours_policy: str
    scenarios: tuple[ScenarioComparison, ...]
    grand_mean_improvement: float
    grand_ci_low: float
    grand_ci_high: float
    friedman: FriedmanResult | None
    rank_policies: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "base_policy": self.base_policy,
            "ours_policy": self.ours_policy,
            "scenarios": [vars(s) for s in self.scenarios],
            "grand_mean_improvement": self.grand_mean_improvement,
            "grand_ci": [self.grand_ci_low, self.grand_ci_high],
            "friedman": (
                None
                if self.friedman is None
                else {
                    "chi2": self.friedman.chi2,
                    "p_value": self.friedman.p_value,
                    "mean_ranks": dict(
                        zip(self.rank_policies, self.friedman.mean_ranks)
                    ),
                    "critical_difference": self.friedman.critical_difference,
                    "n_blocks": self.friedman.n_blocks,
                }
            ),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def format_table(self) -> str:
        head = (
            f"{'scenario':<16}{'base':>9}{'ours':>9}{'improv':>9}"
            f"{'95% CI':>20}{'p(adj)':>9}{'d':>8}"
        )
        lines = [head, "-" * len(head)]
        for s in self.scenarios:
            ci = f"[{s.ci_low:+.1%}, {s.ci_high:+.1%}]"
            lines.append(
                f"{s.scenario:<16}{s.base_mean_wait_s:>9.1f}{s.ours_mean_wait_s:>9.1f}"
                f"{s.improvement:>9.1%}{ci:>20}{s.p_adjusted:>9.4f}{s.effect_size_d:>8.2f}"
            )
        lines.append("-" * len(head))
        lines.append(
            f"grand mean improvement {self.grand_mean_improvement:+.1%} "
            f"(95% CI [{self.grand_ci_low:+.1%}, {self.grand_ci_high:+.1%}])"
        )
        if self.friedman is not None:
            fr = self.friedman
            ranks = ", ".join(
                f"{p}={r:.2f}" for p, r in zip(self.rank_policies, fr.mean_ranks)
            )
            lines.append(
                f"Friedman chi2={fr.chi2:.1f} (p={fr.p_value:.2e}); "
                f"mean ranks {ranks}; Nemenyi CD={fr.critical_difference:.3f}"
            )
        return "\n".join(lines)


def build_stat_report(
    waits: Mapping[str, Mapping[str, Mapping[int, float]]],
    base_policy: str,
    ours_policy: str,
    rank_policies: Sequence[str] | None = None,
    n_resamples: int = 10_000,
    seed: int = 0,
) -> StatReport:
    """Assemble the full comparison report from per-run mean waits.

    waits[policy][scenario][seed] is that run's mean wait. The Wilcoxon
    tests pair on seeds per scenario (one-sided, H1: base > ours), with
    Bonferroni over the scenario count; the Friedman/Nemenyi analysis ranks
    rank_policies over all (scenario, seed) blocks.
    """
    if base_policy not in waits or ours_policy not in waits:
        raise ValueError("base and ours policies must both be present")
    scen_names = sorted(waits[base_policy])
    if not scen_names:
        raise ValueError("no scenarios to compare")
    m = len(scen_names)

    comparisons = []
    improvements: dict[str, list[float]] = {}
    for scen in scen_names:
        base_by_seed = waits[base_policy][scen]
        ours_by_seed = waits[ours_policy][scen]
        seeds = sorted(set(base_by_seed) & set(ours_by_seed))
        if not seeds:
            raise ValueError(f"no common seeds for scenario {scen!r}")
        base_v = [base_by_seed[s] for s in seeds]
        ours_v = [ours_by_seed[s] for s in seeds]
        rel = [
            (b - o) / b if b > 0 else 0.0 for b, o in zip(base_v, ours_v)
        ]
        improvements[scen] = rel
        p_raw = wilcoxon_signed_rank(base_v, ours_v, one_sided=True)
        lo, hi = bootstrap_ci({scen: rel}, n_resamples=n_resamples, seed=seed)
        comparisons.append(
            ScenarioComparison(
                scenario=scen,
                base_mean_wait_s=float(np.mean(base_v)),
                ours_mean_wait_s=float(np.mean(ours_v)),
                improvement=float(np.mean(rel)),
                ci_low=lo,
                ci_high=hi,
                p_raw=p_raw,
                p_adjusted=bonferroni(p_raw, m),
                effect_size_d=(
                    cohens_d(base_v, ours_v) if len(base_v) >= 2 else 0.0
                ),
            )
        )

    grand_lo, grand_hi = bootstrap_ci(improvements, n_resamples=n_resamples, seed=seed)
    grand = float(np.mean([np.mean(v) for v in improvements.values()]))

    friedman = None
    rp: tuple[str, ...] = ()
    if rank_policies is None:
        rank_policies = sorted(waits)
    if len(rank_policies) >= 3:
        rows = []
        for scen in scen_names:
            seed_sets = [set(waits[p].get(scen, {})) for p in rank_policies]
            common = sorted(set.intersection(*seed_sets)) if seed_sets else []
            for sd in common:
                rows.append([waits[p][scen][sd] for p in rank_policies])
        if len(rows) >= 2:
            friedman = friedman_nemenyi(np.asarray(rows))
            rp = tuple(rank_policies)

    return StatReport(
        base_policy=base_policy,
        ours_policy=ours_policy,
        scenarios=tuple(comparisons),
        grand_mean_improvement=grand,
        grand_ci_low=grand_lo,
        grand_ci_high=grand_hi,
        friedman=friedman,
        rank_policies=rp,
    )
