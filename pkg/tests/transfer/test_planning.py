from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvpool.core.exceptions import ModeLayoutMismatch
from kvpool.core.types import BlockConfig, BlockLayout, ModelConfig, ParallelismConfig
from kvpool.transfer import (
    CommunicatorSet,
    NetworkModel,
    TransferMode,
    check_mode_layout,
    plan_transfer,
    repartition,
)


def test_call_counts_of_a_long_prompt():
    model = ModelConfig(num_layers=40)
    discrete = plan_transfer(2048, TransferMode.ByRequest, BlockConfig(16, "Discrete"), model)
    aggregated = plan_transfer(2048, TransferMode.ByRequestAgg, BlockConfig(16, "Aggregated"), model)
    assert discrete.n_calls == 10240
    assert aggregated.n_calls == 128
    assert discrete.n_calls == 2 * 40 * aggregated.n_calls
    assert discrete.bytes_total == pytest.approx(aggregated.bytes_total)


@settings(max_examples=200, deadline=None)
@given(
    n_tokens=st.integers(min_value=1, max_value=8192),
    block_size=st.sampled_from([1, 4, 8, 16, 32, 64]),
    num_layers=st.integers(min_value=1, max_value=96),
)
def test_aggregation_divides_calls_by_twice_the_layers(n_tokens, block_size, num_layers):
    model = ModelConfig(num_layers=num_layers, hidden_size=64)
    n_blocks = -(-n_tokens // block_size)
    discrete = plan_transfer(n_tokens, "ByRequest", BlockConfig(block_size, "Discrete"), model)
    aggregated = plan_transfer(n_tokens, "ByRequestAgg", BlockConfig(block_size, "Aggregated"), model)
    assert aggregated.n_calls == n_blocks
    assert discrete.n_calls == 2 * num_layers * n_blocks
    assert discrete.bytes_total == pytest.approx(n_blocks * model.kv_bytes(block_size))


def test_mode_layout_combinations():
    check_mode_layout(TransferMode.ByRequest, BlockLayout.Discrete)
    check_mode_layout(TransferMode.ByRequest, BlockLayout.Aggregated)
    with pytest.raises(ModeLayoutMismatch):
        check_mode_layout(TransferMode.ByRequestAgg, BlockLayout.Discrete)
    with pytest.raises(ModeLayoutMismatch):
        check_mode_layout(TransferMode.ByLayer, BlockLayout.Aggregated)


def test_by_layer_calls_wait_for_their_layer():
    model = ModelConfig(num_layers=4, hidden_size=8)
    plan = plan_transfer(
        8, TransferMode.ByLayer, BlockConfig(4, "Discrete"), model, layer_finish_times=[1, 2, 3, 4]
    )
    assert [g.earliest_start for g in plan.groups] == [1, 2, 3, 4]
    chunks = plan.chunks
    assert len(chunks) == 16
    assert [(c.layer, c.block, c.kv) for c in chunks[:4]] == [
        (0, 0, "K"), (0, 0, "V"), (0, 1, "K"), (0, 1, "V")
    ]
    with pytest.raises(ValueError):
        plan_transfer(8, TransferMode.ByLayer, BlockConfig(4, "Discrete"), model)


def test_empty_transfer_has_no_calls():
    plan = plan_transfer(0, TransferMode.ByRequest, BlockConfig(4), ModelConfig())
    assert plan.n_calls == 0
    assert plan.chunks == []


@pytest.mark.parametrize(
    "src, dst, num_layers",
    [((1, 1), (1, 1), 4), ((2, 1), (1, 1), 4), ((1, 2), (4, 1), 6), ((3, 2), (2, 3), 7)],
)
def test_repartition_covers_the_cache_once(src, dst, num_layers):
    shards = repartition(ParallelismConfig(*src), ParallelismConfig(*dst), num_layers)
    covered = sum(s.head_fraction * (s.layer_hi - s.layer_lo) for s in shards)
    assert covered == Fraction(num_layers)
    assert len({s.src_rank for s in shards}) == src[0] * src[1]
    assert len({s.dst_rank for s in shards}) == dst[0] * dst[1]


def test_call_time_with_asymmetric_parallelism():
    net = NetworkModel(per_call_overhead=1.0, hbm_bandwidth=10.0, dram_bandwidth=1.0)
    one, two = ParallelismConfig(1, 1), ParallelismConfig(2, 1)
    assert net.call_time(10.0, 10.0, one, one) == pytest.approx(2.0)
    # one sender rank, two shards
    assert net.call_time(10.0, 10.0, one, two) == pytest.approx(3.0)
    # two sender ranks in parallel
    assert net.call_time(10.0, 10.0, two, one) == pytest.approx(1.5)


def test_communicators_serve_calls_in_order():
    comms = CommunicatorSet(1)
    assert comms.schedule(0.0, 3, 1.0) == (0.0, 3.0)
    assert comms.schedule(1.0, 1, 1.0) == (3.0, 4.0)
    parallel = CommunicatorSet(2)
    assert parallel.schedule(0.0, 3, 1.0) == (0.0, 2.0)
