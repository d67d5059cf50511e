"""Similarity metric and ensemble tests.

Distributional metrics are checked against scipy's independent
implementations; the metric-suite properties (bounds, reflexivity, symmetry,
bounded event asymmetry) are checked on random series pairs.
"""

import numpy as np
import pytest
import scipy.stats as sstats

from regime_dispatch.ingestion import BlockMeta, compute_features, detect_events
from regime_dispatch.similarity import (
    METRIC_NAMES,
    NoCandidatesError,
    QueryContext,
    SimilarityWeights,
    WEIGHT_PRESETS,
    ensemble_score,
    gate_weights,
    library_feature_scale,
    sim_event,
    sim_feat,
    sim_ks,
    sim_temporal,
    sim_var,
    sim_w1,
    top_k,
    wasserstein1,
)

from conftest import make_block


def _random_series(rng, n=48):
    base = rng.poisson(rng.uniform(2.0, 12.0), size=n).astype(float)
    if rng.uniform() < 0.3:
        # occasional surge so the event metric sees non-empty sets
        k = rng.integers(0, n - 3)
        base[k : k + 3] += rng.uniform(30.0, 80.0)
    return base


def test_sim_ks_matches_scipy():
    rng = np.random.default_rng(5)
    for _ in range(50):
        q = _random_series(rng)
        r = _random_series(rng)
        want = 1.0 - sstats.ks_2samp(q, r, method="exact").statistic
        assert sim_ks(q, r) == pytest.approx(want, abs=1e-12)


def test_wasserstein1_matches_scipy():
    rng = np.random.default_rng(6)
    for _ in range(50):
        u = rng.uniform(0, 20, size=rng.integers(2, 60))
        v = rng.uniform(0, 20, size=rng.integers(2, 60))
        assert wasserstein1(u, v) == pytest.approx(
            sstats.wasserstein_distance(u, v), abs=1e-10
        )


def test_wasserstein1_point_masses():
    assert wasserstein1([3.0], [7.0]) == pytest.approx(4.0)
    assert wasserstein1([2.0, 2.0], [2.0, 2.0]) == 0.0


def test_sim_w1_normalization():
    q = np.array([0.0, 10.0])
    r = np.array([5.0, 5.0])
    w1 = sstats.wasserstein_distance(q, r)
    rng_ = 10.0  # pooled range
    assert sim_w1(q, r) == pytest.approx(1.0 / (1.0 + w1 / rng_))
    # identical constant series: zero distance, range guard kicks in
    assert sim_w1([4.0, 4.0], [4.0, 4.0]) == 1.0


def test_sim_feat_hand_math():
    fa = compute_features([1.0, 2.0, 3.0, 4.0])
    fb = compute_features([2.0, 2.0, 4.0, 4.0])
    d = float(np.linalg.norm(fa.as_vector() - fb.as_vector()))
    assert sim_feat(fa, fb) == pytest.approx(1.0 / (1.0 + d))
    scale = np.full(7, 2.0)
    d_scaled = float(np.linalg.norm((fa.as_vector() - fb.as_vector()) / 2.0))
    assert sim_feat(fa, fb, scale=scale) == pytest.approx(1.0 / (1.0 + d_scaled))


def test_sim_var_cases():
    assert sim_var(2.0, 4.0) == 0.5
    assert sim_var(4.0, 2.0) == 0.5
    assert sim_var(3.0, 3.0) == 1.0
    assert sim_var(0.0, 0.0) == 1.0
    assert sim_var(0.0, 2.0) == 0.0
    with pytest.raises(ValueError):
        sim_var(-1.0, 2.0)


def test_sim_event_empty_conventions():
    spike = [6.0] * 48
    spike[20] = 80.0
    events = tuple(detect_events(spike))
    assert events
    assert sim_event((), ()) == 1.0
    assert sim_event(events, ()) == 0.0
    assert sim_event((), events) == 0.0
    assert sim_event(events, events) == pytest.approx(1.0)


def test_sim_event_count_ratio_term():
    base = [6.0] * 48
    one = list(base)
    one[10] = 80.0
    two = list(base)
    two[10] = 80.0
    two[30] = 80.0
    e1 = tuple(detect_events(one))
    e2 = tuple(detect_events(two))
    assert (len(e1), len(e2)) == (1, 2)
    s = sim_event(e1, e2)
    # the count term is 1/2; the other three terms are at most 1
    assert s <= 0.25 * (1.0 + 1.0 + 1.0 + 0.5) + 1e-12


def test_sim_temporal_facets():
    a = BlockMeta(month=3, day_type="weekday", hour_block=2)
    assert sim_temporal(a, a) == 1.0
    assert sim_temporal(a, BlockMeta(3, "weekday", 5)) == pytest.approx(2 / 3)
    assert sim_temporal(a, BlockMeta(6, "weekend", 5)) == 0.0


def test_metric_suite_bounds_and_reflexivity():
    rng = np.random.default_rng(7)
    metas = [
        BlockMeta(
            month=int(rng.integers(1, 13)),
            day_type=str(rng.choice(["weekday", "weekend", "holiday"])),
            hour_block=int(rng.integers(0, 6)),
        )
        for _ in range(2)
    ]
    for _ in range(200):
        q = _random_series(rng)
        r = _random_series(rng)
        fq, fr = compute_features(q), compute_features(r)
        eq, er = tuple(detect_events(q)), tuple(detect_events(r))
        values = [
            sim_ks(q, r),
            sim_w1(q, r),
            sim_feat(fq, fr),
            sim_var(fq.std, fr.std),
            sim_event(eq, er),
            sim_temporal(metas[0], metas[1]),
        ]
        assert all(0.0 <= v <= 1.0 + 1e-12 for v in values)
        self_values = [
            sim_ks(q, q),
            sim_w1(q, q),
            sim_feat(fq, fq),
            sim_var(fq.std, fq.std),
            sim_event(eq, eq),
            sim_temporal(metas[0], metas[0]),
        ]
        assert all(v == pytest.approx(1.0, abs=1e-12) for v in self_values)


def test_metric_suite_symmetry():
    rng = np.random.default_rng(8)
    for _ in range(200):
        q = _random_series(rng)
        r = _random_series(rng)
        fq, fr = compute_features(q), compute_features(r)
        ma = BlockMeta(1, "weekday", 2)
        mb = BlockMeta(6, "weekend", 5)
        assert abs(sim_ks(q, r) - sim_ks(r, q)) <= 1e-12
        assert abs(sim_w1(q, r) - sim_w1(r, q)) <= 1e-12
        assert abs(sim_feat(fq, fr) - sim_feat(fr, fq)) <= 1e-12
        assert abs(sim_var(fq.std, fr.std) - sim_var(fr.std, fq.std)) <= 1e-12
        assert abs(sim_temporal(ma, mb) - sim_temporal(mb, ma)) <= 1e-12


def test_event_metric_asymmetry_is_bounded():
    # only the chronological pre-surge pairing term depends on order, and it
    # carries a quarter of the weight
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(300):
        q = _random_series(rng)
        r = _random_series(rng)
        eq, er = tuple(detect_events(q)), tuple(detect_events(r))
        worst = max(worst, abs(sim_event(eq, er) - sim_event(er, eq)))
    assert worst <= 0.25 + 1e-12


def test_weights_validation():
    with pytest.raises(ValueError):
        SimilarityWeights(ks=-0.1, w1=0.5, feat=0.15, var=0.1, event=0.2, temporal=0.15)
    with pytest.raises(ValueError):
        SimilarityWeights(ks=0.5, w1=0.5, feat=0.5, var=0.1, event=0.2, temporal=0.15)
    w = SimilarityWeights()
    assert sum(w.as_dict().values()) == pytest.approx(1.0)
    assert set(w.as_dict()) == set(METRIC_NAMES)


def test_gate_weights_redistribution():
    w = SimilarityWeights()
    gated = gate_weights(w, query_has_events=True, record_has_events=False)
    assert gated.event == 0.0
    assert gated.ks == pytest.approx(w.ks + w.event / 2)
    assert gated.w1 == pytest.approx(w.w1 + w.event / 2)
    assert sum(gated.as_dict().values()) == pytest.approx(1.0)
    # same on both sides: untouched
    assert gate_weights(w, True, True) == w
    assert gate_weights(w, False, False) == w


def test_ensemble_score_is_weighted_sum(tiny_library):
    lib = tiny_library
    qc = QueryContext.from_block(lib.records[0])
    rec = lib.records[2]
    m = ensemble_score(qc, rec)
    manual = sum(
        getattr(m.effective_weights, name) * m.components[name]
        for name in METRIC_NAMES
    )
    assert m.total_score == pytest.approx(manual, abs=1e-12)
    assert 0.0 <= m.total_score <= 1.0


def test_ensemble_self_score_is_perfect(tiny_library):
    block = tiny_library.records[0]
    qc = QueryContext.from_block(block)
    m = ensemble_score(qc, block)
    assert m.total_score == pytest.approx(1.0, abs=1e-12)


def test_prefix_mode_self_score(tiny_library):
    block = tiny_library.records[0]
    qc = QueryContext.from_block(block, mode="prefix", prefix_bins=12)
    assert len(qc.series) == 12
    m = ensemble_score(qc, block)
    assert m.total_score == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        QueryContext.from_block(block, mode="prefix", prefix_bins=0)
    with pytest.raises(ValueError):
        QueryContext.from_block(block, mode="prefix", prefix_bins=len(block.demand_series) + 1)


def test_top_k_ordering_and_exclusion(small_lib):
    truth = small_lib.records[0]
    qc = QueryContext.from_block(truth)
    matches = top_k(qc, small_lib, k=5, exclude={truth.block_id})
    assert len(matches) == 5
    assert truth.block_id not in [m.block_id for m in matches]
    scores = [m.total_score for m in matches]
    assert scores == sorted(scores, reverse=True)
    # a self-match would have ranked first with score 1
    with_self = top_k(qc, small_lib, k=1)
    assert with_self[0].block_id == truth.block_id
    assert with_self[0].total_score == pytest.approx(1.0, abs=1e-12)


def test_top_k_scores_use_library_feature_scale(small_lib):
    truth = small_lib.records[3]
    qc = QueryContext.from_block(truth)
    scale = library_feature_scale(small_lib)
    best = top_k(qc, small_lib, k=1, exclude={truth.block_id})[0]
    manual = ensemble_score(
        qc,
        small_lib.get(best.block_id),
        feat_scale=scale,
        event_threshold=small_lib.build_config.event_threshold,
        event_window=small_lib.build_config.event_window,
    )
    assert best.total_score == pytest.approx(manual.total_score, abs=1e-12)


def test_top_k_tie_breaks_on_block_id(tiny_library):
    # two records with identical content but different ids score equally;
    # the lexically smaller id must come first
    import dataclasses

    a = tiny_library.records[0]
    clone = dataclasses.replace(a, block_id="aaa_clone")
    from regime_dispatch.ingestion import RegimeLibrary

    lib = RegimeLibrary(records=[a, clone], build_config=tiny_library.build_config)
    qc = QueryContext.from_block(a)
    matches = top_k(qc, lib, k=2)
    assert [m.block_id for m in matches] == sorted([a.block_id, "aaa_clone"])
    assert matches[0].total_score == pytest.approx(matches[1].total_score)


def test_top_k_no_candidates(tiny_library):
    qc = QueryContext.from_block(tiny_library.records[0])
    with pytest.raises(NoCandidatesError):
        top_k(qc, tiny_library, exclude=set(tiny_library.block_ids))


def test_weight_presets():
    assert set(WEIGHT_PRESETS) >= {"default", "distributional_only"}
    dist = WEIGHT_PRESETS["distributional_only"]()
    assert dist.temporal == 0.0
    assert sum(dist.as_dict().values()) == pytest.approx(1.0)
