import pytest

from kvpool.core.exceptions import DstOutOfMemory, DstUnreachable
from kvpool.core.types import BlockConfig, Medium, ModelConfig, block_tags
from kvpool.mempool import MemPool
from kvpool.transfer import NetworkModel, TransferEngine, TransferFlags, TransferMode


@pytest.fixture
def setup():
    block = BlockConfig(block_size=4, layout="Aggregated")
    model = ModelConfig(num_layers=4, hidden_size=8)
    pools = {
        "p0": MemPool("p0", block, 16),
        "d0": MemPool("d0", block, 8),
        "d1": MemPool("d1", block, 8),
    }
    reachable = {"p0": True, "d0": True, "d1": True}
    network = NetworkModel(per_call_overhead=1e-3, hbm_bandwidth=1e6, dram_bandwidth=1e5, control_rtt=1e-2)
    engine = TransferEngine(network, model, block, pools, is_reachable=lambda i: reachable[i])
    return engine, pools, reachable


def prefilled(pool, tokens, owner=1):
    addrs = pool.alloc_mem(-(-len(tokens) // 4), owner=owner)
    pool.set_tags(addrs, block_tags(tokens, 4))
    return addrs


def test_transfer_moves_tags_and_ownership(setup):
    engine, pools, _ = setup
    tokens = tuple(range(10))
    src = prefilled(pools["p0"], tokens)
    handle = engine.transfer("p0", "d0", src, now=1.0, mode=TransferMode.ByRequestAgg, request_id=1)
    assert handle.n_calls == 3
    assert handle.control_messages == 2
    assert handle.end_time > 1.0 + engine.network.control_rtt
    assert engine.complete(handle, handle.end_time)
    assert pools["d0"].tags(handle.dst_addrs) == block_tags(tokens, 4)
    assert all(pools["d0"].meta(a).owner == 1 for a in handle.dst_addrs)
    assert engine.records[-1].status == "done"
    assert not engine.complete(handle, handle.end_time)


def test_estimate_matches_idle_transfer(setup):
    engine, pools, _ = setup
    src = prefilled(pools["p0"], tuple(range(16)))
    estimate = engine.estimate_time(4, "p0", "d0", TransferMode.ByRequestAgg)
    handle = engine.transfer("p0", "d0", src, now=0.0, mode=TransferMode.ByRequestAgg)
    assert handle.end_time == pytest.approx(estimate)


def test_insert_at_receiver_sends_only_missing_blocks(setup):
    engine, pools, _ = setup
    tokens = tuple(range(16))
    src = prefilled(pools["p0"], tokens)
    first = engine.transfer_with_insert(
        "p0", "d0", tokens[:8], src[:2], now=0.0, mode="ByRequestAgg", request_id=1
    )
    engine.complete(first, first.end_time)
    assert pools["d0"].match(tokens).matched_tokens == 8

    second = engine.transfer_with_insert(
        "p0", "d0", tokens, src, flags=TransferFlags(pin_at_receiver=True),
        now=1.0, mode="ByRequestAgg", request_id=2,
    )
    assert second.send_indices == [2, 3]
    assert second.n_calls == 2
    engine.complete(second, second.end_time)
    assert second.dst_addrs[:2] == first.dst_addrs
    assert pools["d0"].match(tokens).matched_tokens == 16
    assert second.dst_node is not None and second.dst_node.ref_count == 1
    pools["d0"].check_invariants()


def test_abort_releases_receiver_blocks(setup):
    engine, pools, _ = setup
    src = prefilled(pools["p0"], tuple(range(16)))
    handle = engine.transfer("p0", "d0", src, now=0.0, mode="ByRequestAgg", request_id=3)
    assert pools["d0"].num_free() == 4
    engine.abort(handle, 0.5)
    assert pools["d0"].num_free() == 8
    assert engine.records[-1].status == "aborted"
    assert not engine.complete(handle, handle.end_time)


def test_receiver_out_of_memory(setup):
    engine, pools, _ = setup
    src = prefilled(pools["p0"], tuple(range(40)))
    with pytest.raises(DstOutOfMemory):
        engine.transfer("p0", "d0", src, now=0.0, mode="ByRequestAgg")
    assert pools["d0"].num_free() == 8


def test_unreachable_receiver_aborts_on_completion(setup):
    engine, pools, reachable = setup
    src = prefilled(pools["p0"], tuple(range(8)))
    handle = engine.transfer("p0", "d0", src, now=0.0, mode="ByRequestAgg", request_id=1)
    reachable["d0"] = False
    with pytest.raises(DstUnreachable):
        engine.complete(handle, handle.end_time)
    assert handle.aborted
    with pytest.raises(DstUnreachable):
        engine.transfer("p0", "d0", src, now=1.0, mode="ByRequestAgg")


def test_dram_source_is_slower(setup):
    engine, _, _ = setup
    hbm = engine.estimate_time(4, "p0", "d0", TransferMode.ByRequestAgg, Medium.HBM)
    dram = engine.estimate_time(4, "p0", "d0", TransferMode.ByRequestAgg, Medium.DRAM)
    assert dram > hbm


def test_abort_instance(setup):
    engine, pools, _ = setup
    src = prefilled(pools["p0"], tuple(range(8)))
    handle = engine.transfer("p0", "d0", src, now=0.0, mode="ByRequestAgg", request_id=1)
    assert engine.abort_instance("d0", 0.1) == [handle]
    assert engine.in_flight == {}


def index_shape(pool):
    return [(n.key, [a.block_index for a in n.values], n.ref_count) for n in pool.index.iter_nodes()]


def test_separate_insert_matches_inserting_transfer(setup):
    engine, pools, _ = setup
    tokens = tuple(range(10))
    src = prefilled(pools["p0"], tokens)
    fused = engine.transfer_with_insert("p0", "d0", tokens, src, now=0.0, mode="ByRequestAgg", request_id=1)
    plain = engine.transfer("p0", "d1", src, now=0.0, mode="ByRequestAgg", request_id=1)
    assert engine.complete(fused, fused.end_time)
    assert engine.complete(plain, plain.end_time)
    assert pools["d1"].index.num_blocks == 0
    result, acked = engine.insert_remote("d1", tokens, plain.dst_addrs, plain.end_time)
    assert len(result.addrs) == 2
    assert index_shape(pools["d0"]) == index_shape(pools["d1"])
    assert pools["d1"].match(tokens).n_blocks == 2
    assert plain.end_time == pytest.approx(fused.end_time)
    assert acked == pytest.approx(fused.end_time + engine.network.control_rtt)


def test_insert_remote_to_unreachable_instance(setup):
    engine, pools, reachable = setup
    reachable["d1"] = False
    with pytest.raises(DstUnreachable):
        engine.insert_remote("d1", tuple(range(4)), pools["d0"].alloc_mem(1), 0.0)


def test_skip_alloc_needs_destination(setup):
    engine, pools, _ = setup
    src = prefilled(pools["p0"], tuple(range(8)))
    with pytest.raises(ValueError):
        engine.transfer("p0", "d0", src, flags=TransferFlags(skip_alloc=True), now=0.0)
    assert pools["d0"].num_free() == 8


def test_caller_flags_are_not_changed(setup):
    engine, pools, _ = setup
    src = prefilled(pools["p0"], tuple(range(8)))
    flags = TransferFlags(pin_at_receiver=True)
    dst = pools["d0"].alloc_mem(2, owner=1)
    handle = engine.transfer_with_insert(
        "p0", "d0", tuple(range(8)), src, dst, flags, now=0.0, mode="ByRequestAgg", request_id=1
    )
    assert flags == TransferFlags(pin_at_receiver=True)
    assert handle.flags.insert_at_receiver and handle.flags.skip_alloc and handle.flags.pin_at_receiver
    assert handle.control_messages == 1
    plain = engine.transfer("p0", "d1", src, flags=flags, now=0.0, mode="ByRequestAgg", request_id=1)
    assert not plain.flags.insert_at_receiver and not plain.flags.skip_alloc
    assert plain.control_messages == 2


def test_private_metadata_travels_with_the_handle(setup):
    engine, pools, _ = setup
    src = prefilled(pools["p0"], tuple(range(8)))
    private = {"request_id": 7, "sampling_params": {"temperature": 0.0}}
    handle = engine.transfer("p0", "d0", src, private=private, now=0.0, mode="ByRequestAgg", request_id=7)
    assert engine.complete(handle, handle.end_time)
    assert handle.private == private
