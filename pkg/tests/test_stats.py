"""Statistical battery tests. The Wilcoxon oracle enumerates all 2^n sign
patterns directly, so it validates the DP-based exact tail independently."""

import itertools
import json

import numpy as np
import pytest
from scipy import stats as sstats

from regime_dispatch.stats import (
    bonferroni,
    bootstrap_ci,
    build_stat_report,
    cohens_d,
    friedman_nemenyi,
    wilcoxon_signed_rank,
)


def signflip_pvalues(diffs):
    """Exact (p_ge, p_le) of W+ by brute-force sign enumeration."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0.0]
    n = d.size
    ranks = sstats.rankdata(np.abs(d))
    r2 = np.round(2.0 * ranks).astype(int)  # doubled so average ranks are integral
    obs = int(round(2.0 * float(ranks[d > 0].sum())))
    n_ge = n_le = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = int(np.dot(signs, r2))
        n_ge += w >= obs
        n_le += w <= obs
    total = 2**n
    return n_ge / total, n_le / total


def test_wilcoxon_matches_enumeration_all_small_n():
    rng = np.random.default_rng(31)
    for n in range(1, 11):
        for _ in range(30):
            # small integer diffs force ties in |d| and occasional zeros;
            # integer bases keep a - b exactly representable
            d = rng.integers(-3, 4, size=n).astype(float)
            b = rng.integers(50, 150, size=n).astype(float)
            a = b + d
            if np.all(d == 0.0):
                assert wilcoxon_signed_rank(a, b) == 1.0
                continue
            p_ge, p_le = signflip_pvalues(d)
            one = wilcoxon_signed_rank(a, b, one_sided=True)
            two = wilcoxon_signed_rank(a, b)
            assert one == pytest.approx(p_ge, abs=1e-12)
            assert two == pytest.approx(min(1.0, 2.0 * min(p_ge, p_le)), abs=1e-12)


def test_wilcoxon_five_seeds_all_improved():
    base = [100.0, 110.0, 105.0, 98.0, 120.0]
    ours = [90.0, 95.0, 101.0, 88.0, 104.0]
    assert wilcoxon_signed_rank(base, ours, one_sided=True) == 0.03125


def test_wilcoxon_agrees_with_scipy_exact():
    rng = np.random.default_rng(32)
    for n in (6, 8, 12, 16):
        for _ in range(10):
            mags = rng.choice(np.arange(1, 60), size=n, replace=False)
            d = mags * rng.choice([-1.0, 1.0], size=n)
            b = rng.uniform(100.0, 200.0, size=n)
            a = b + d
            ref = sstats.wilcoxon(a, b, alternative="greater", method="exact").pvalue
            assert wilcoxon_signed_rank(a, b, one_sided=True) == pytest.approx(
                ref, abs=1e-12
            )


def test_wilcoxon_large_n_normal_tail():
    rng = np.random.default_rng(33)
    b = rng.uniform(100.0, 200.0, size=40)
    a = b + rng.uniform(5.0, 15.0, size=40)  # every pair improves
    one = wilcoxon_signed_rank(a, b, one_sided=True)
    two = wilcoxon_signed_rank(a, b)
    assert one < 1e-6
    assert two == pytest.approx(2.0 * one)
    mixed = wilcoxon_signed_rank(b + rng.normal(0, 1, 40), b)
    assert 0.0 <= mixed <= 1.0


def test_wilcoxon_input_validation():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([[1.0]], [[1.0]])


def test_bonferroni():
    assert bonferroni(1.0 / 32.0, 8) == 0.25
    assert bonferroni(0.2, 8) == 1.0
    assert bonferroni(0.05, 1) == 0.05
    with pytest.raises(ValueError):
        bonferroni(0.05, 0)


def test_friedman_matches_scipy():
    rng = np.random.default_rng(34)
    for _ in range(20):
        n = int(rng.integers(5, 30))
        k = int(rng.integers(3, 7))
        m = rng.uniform(0.0, 100.0, size=(n, k))  # continuous, ties a.s. absent
        res = friedman_nemenyi(m)
        ref = sstats.friedmanchisquare(*(m[:, j] for j in range(k)))
        assert res.chi2 == pytest.approx(ref.statistic, abs=1e-9)
        assert res.p_value == pytest.approx(ref.pvalue, abs=1e-12)


def test_friedman_mean_ranks_and_cd():
    m = np.array([[1.0, 3.0, 2.0], [1.5, 2.5, 3.5], [0.5, 9.0, 4.0], [2.0, 8.0, 3.0]])
    res = friedman_nemenyi(m)
    assert res.mean_ranks == (1.0, 2.75, 2.25)
    assert res.critical_difference == pytest.approx(
        2.343701 * np.sqrt(3 * 4 / (6.0 * 4))
    )


def test_friedman_perfectly_separated_40x3():
    rng = np.random.default_rng(35)
    base = rng.uniform(50.0, 150.0, size=40)
    m = np.stack([base, base + 10.0, base + 20.0], axis=1)
    res = friedman_nemenyi(m)
    assert res.chi2 == 80.0
    assert res.mean_ranks == (1.0, 2.0, 3.0)
    assert res.critical_difference == pytest.approx(0.524, abs=1e-3)
    assert res.p_value == pytest.approx(float(sstats.chi2.sf(80.0, df=2)))
    assert res.n_blocks == 40 and res.n_treatments == 3


def test_friedman_validation():
    with pytest.raises(ValueError):
        friedman_nemenyi(np.ones((5, 2)))
    with pytest.raises(ValueError):
        friedman_nemenyi(np.ones((1, 3)))
    with pytest.raises(ValueError):
        friedman_nemenyi(np.ones((5, 11)))
    with pytest.raises(ValueError):
        friedman_nemenyi(np.ones(6))


def test_cohens_d_hand_case():
    a = [10.0, 12.0, 14.0]
    b = [9.0, 10.0, 11.0]
    # pooled std of variances 4 and 1 over 4 dof
    pooled = np.sqrt((2 * 4.0 + 2 * 1.0) / 4.0)
    assert cohens_d(a, b) == pytest.approx((12.0 - 10.0) / pooled)
    assert cohens_d(b, a) == pytest.approx(-cohens_d(a, b))


def test_cohens_d_degenerate():
    assert cohens_d([5.0, 5.0], [5.0, 5.0]) == 0.0
    assert cohens_d([6.0, 6.0], [5.0, 5.0]) == np.inf
    assert cohens_d([4.0, 4.0], [5.0, 5.0]) == -np.inf
    with pytest.raises(ValueError):
        cohens_d([1.0], [2.0, 3.0])


def test_bootstrap_ci_deterministic_and_ordered():
    groups = {
        "a": [0.10, 0.12, 0.08],
        "b": [0.20, 0.18, 0.25],
    }
    lo1, hi1 = bootstrap_ci(groups, n_resamples=500, seed=9)
    lo2, hi2 = bootstrap_ci(groups, n_resamples=500, seed=9)
    assert (lo1, hi1) == (lo2, hi2)
    assert lo1 <= hi1
    flat = [v for vs in groups.values() for v in vs]
    assert min(flat) - 1e-12 <= lo1 and hi1 <= max(flat) + 1e-12


def test_bootstrap_ci_degenerate_and_invalid():
    lo, hi = bootstrap_ci({"only": [0.3, 0.3, 0.3]}, n_resamples=100, seed=1)
    assert lo == hi == pytest.approx(0.3)
    with pytest.raises(ValueError):
        bootstrap_ci({}, n_resamples=10)
    with pytest.raises(ValueError):
        bootstrap_ci({"a": []}, n_resamples=10)


def _hand_waits():
    return {
        "replay_batch": {
            "s1": {42: 100.0, 142: 110.0, 242: 120.0},
            "s2": {42: 200.0, 142: 210.0, 242: 190.0},
        },
        "cal_lp": {
            "s1": {42: 80.0, 142: 99.0, 242: 96.0},
            "s2": {42: 150.0, 142: 168.0, 242: 171.0},
        },
        "replay_greedy": {
            "s1": {42: 130.0, 142: 140.0, 242: 150.0},
            "s2": {42: 240.0, 142: 250.0, 242: 230.0},
        },
    }


def test_build_stat_report_hand_case():
    report = build_stat_report(
        _hand_waits(), "replay_batch", "cal_lp", n_resamples=300, seed=5
    )
    assert [s.scenario for s in report.scenarios] == ["s1", "s2"]
    s1, s2 = report.scenarios
    assert s1.base_mean_wait_s == pytest.approx(110.0)
    assert s1.ours_mean_wait_s == pytest.approx(np.mean([80.0, 99.0, 96.0]))
    assert s1.improvement == pytest.approx(np.mean([0.2, 0.1, 0.2]))
    assert s2.improvement == pytest.approx(np.mean([0.25, 0.2, 0.1]))
    assert report.grand_mean_improvement == pytest.approx(
        (s1.improvement + s2.improvement) / 2.0
    )
    # all three seeds improved: one-sided exact p is 1/8 per scenario
    assert s1.p_raw == 0.125
    assert s1.p_adjusted == 0.25
    assert s1.effect_size_d == pytest.approx(
        cohens_d([100.0, 110.0, 120.0], [80.0, 99.0, 96.0])
    )
    assert report.grand_ci_low <= report.grand_mean_improvement <= report.grand_ci_high


def test_build_stat_report_friedman_ranking():
    report = build_stat_report(
        _hand_waits(), "replay_batch", "cal_lp", n_resamples=200, seed=5
    )
    assert report.rank_policies == ("cal_lp", "replay_batch", "replay_greedy")
    fr = report.friedman
    assert fr is not None
    assert fr.n_blocks == 6
    assert fr.mean_ranks == (1.0, 2.0, 3.0)
    assert fr.chi2 == pytest.approx(12.0)


def test_build_stat_report_serialization():
    report = build_stat_report(
        _hand_waits(), "replay_batch", "cal_lp", n_resamples=200, seed=5
    )
    doc = json.loads(report.to_json())
    assert doc["base_policy"] == "replay_batch"
    assert doc["friedman"]["mean_ranks"] == {
        "cal_lp": 1.0,
        "replay_batch": 2.0,
        "replay_greedy": 3.0,
    }
    table = report.format_table()
    assert "s1" in table and "s2" in table
    assert "grand mean improvement" in table
    assert "Nemenyi CD" in table


def test_build_stat_report_missing_policy():
    with pytest.raises(ValueError):
        build_stat_report(_hand_waits(), "replay_batch", "nope", n_resamples=50)
