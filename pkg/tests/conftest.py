"""Shared fixtures: a small synthetic regime library and hand-built blocks."""

import numpy as np
import pytest

from regime_dispatch import synth
from regime_dispatch.ingestion import (
    BlockMeta,
    IngestConfig,
    RegimeBlock,
    RegimeLibrary,
    compute_features,
    detect_events,
)


@pytest.fixture(scope="session")
def small_lib():
    """A 32-block synthetic library (8 blocks per family)."""
    return synth.generate_synthetic_library(
        blocks_per_profile=8, seed=7, bbox=synth.SYNTH_BBOX
    )


@pytest.fixture(scope="session")
def small_truth():
    """A held-out truth block from the rush family, matching small_lib."""
    profile = synth.default_profiles()[0]
    block, trips = synth.truth_block(
        profile, truth_index=0, seed=7, bbox=synth.SYNTH_BBOX
    )
    return block, trips


def make_block(series, block_id="b0", start_s=0.0, month=1, day_type="weekday",
               hour_block=8, od_center=(40.75, -73.97)):
    """A minimal valid RegimeBlock whose OD pool sits at one point."""
    series = tuple(int(v) for v in series)
    n = sum(series)
    od = tuple(((od_center[0], od_center[1]), (od_center[0], od_center[1]))
               for _ in range(n))
    return RegimeBlock(
        block_id=block_id,
        start_s=start_s,
        demand_series=series,
        features=compute_features(series),
        od_pool=od,
        events=tuple(detect_events(series)),
        metadata=BlockMeta(month=month, day_type=day_type, hour_block=hour_block),
    )


@pytest.fixture
def tiny_block():
    rng = np.random.default_rng(3)
    series = rng.poisson(6.0, size=48)
    return make_block(series)


@pytest.fixture
def tiny_library():
    """Four hand-built blocks with distinct series and calendars."""
    rng = np.random.default_rng(11)
    records = []
    for i, (month, day_type, hour) in enumerate(
        [(1, "weekday", 8), (1, "weekday", 8), (6, "weekend", 20), (6, "holiday", 12)]
    ):
        series = rng.poisson(4.0 + 3.0 * i, size=48)
        records.append(
            make_block(
                series,
                block_id=f"blk{i}",
                month=month,
                day_type=day_type,
                hour_block=hour,
                od_center=(40.74 + 0.01 * i, -73.99 + 0.01 * i),
            )
        )
    return RegimeLibrary(records=records, build_config=IngestConfig())
