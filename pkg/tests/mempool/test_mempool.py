import time

import numpy as np
import pytest
from scipy.stats import linregress

from kvpool.core.exceptions import DoubleFree, InvalidAddr, OutOfMemory
from kvpool.core.types import AllocType, BlockAddr, BlockConfig, Medium, block_tags
from kvpool.mempool import BlockPool, MemPool, MemPoolConfig


@pytest.fixture
def clock():
    return {"t": 0.0}


def make_pool(clock, hbm=8, dram=0, eviction=True, swap=True, swap_cost=0.0):
    return MemPool(
        "i0",
        BlockConfig(block_size=4),
        hbm,
        dram,
        MemPoolConfig(eviction=eviction, swap=swap),
        clock=lambda: clock["t"],
        swap_cost_per_block=swap_cost,
    )


def test_block_pool_hands_out_lowest_indices():
    pool = BlockPool("i0", Medium.HBM, 4)
    assert pool.alloc(2, "i0") == [0, 1]
    pool.free([0])
    assert pool.alloc(2, "i0") == [0, 2]
    with pytest.raises(OutOfMemory):
        pool.alloc(2, "i0")
    with pytest.raises(DoubleFree):
        pool.free([1, 1])
    with pytest.raises(InvalidAddr):
        pool.free([7])
    pool.check_conservation()


def test_alloc_and_free(clock):
    mp = make_pool(clock)
    addrs = mp.alloc_mem(3, AllocType.HBM, owner=5)
    assert [a.block_index for a in addrs] == [0, 1, 2]
    assert mp.num_free() == 5
    assert mp.free_owned(addrs, owner=6) == []
    assert mp.free_owned(addrs, owner=5) == addrs
    assert mp.num_free() == 8
    with pytest.raises(DoubleFree):
        mp.free_mem(addrs)
    with pytest.raises(InvalidAddr):
        mp.free_mem([BlockAddr("i1", Medium.HBM, 0)])
    mp.check_invariants()


def test_mixed_allocation_spills_into_dram(clock):
    mp = make_pool(clock, hbm=2, dram=4)
    addrs = mp.alloc_mem(5, AllocType.Mixed)
    assert [a.medium for a in addrs] == [Medium.HBM] * 2 + [Medium.DRAM] * 3
    with pytest.raises(OutOfMemory):
        mp.alloc_mem(2, AllocType.Mixed)


def test_insert_frees_duplicate_blocks(clock):
    mp = make_pool(clock)
    tokens = tuple(range(10))
    first = mp.alloc_mem(3, owner=1)
    result = mp.insert(tokens, first)
    assert result.addrs == first[:2]
    mp.free_owned(first, owner=1)

    second = mp.alloc_mem(3, owner=2)
    result = mp.insert(tokens, second)
    assert result.addrs == first[:2]
    assert result.freed_duplicates == second[:2]
    assert mp.num_free() == 8 - 2 - 1
    with pytest.raises(InvalidAddr):
        mp.free_mem(first[:1])
    mp.check_invariants()


def test_match_returns_block_aligned_prefix(clock):
    mp = make_pool(clock)
    tokens = tuple(range(12))
    mp.insert(tokens, mp.alloc_mem(3))
    m = mp.match(tokens[:10] + (99, 99))
    assert m.matched_tokens == 8
    assert m.n_blocks == 2
    assert mp.match((99,) * 8).matched_tokens == 0


def test_allocation_evicts_unpinned_history(clock):
    mp = make_pool(clock, hbm=4)
    mp.insert(tuple(range(8)), mp.alloc_mem(2))
    clock["t"] = 1.0
    pinned = mp.insert(tuple(range(100, 108)), mp.alloc_mem(2))
    mp.lock(pinned.node)
    assert len(mp.alloc_mem(2, owner=1)) == 2
    assert mp.match(tuple(range(8))).n_blocks == 0
    assert mp.match(tuple(range(100, 108))).n_blocks == 2
    with pytest.raises(OutOfMemory):
        mp.alloc_mem(1)
    mp.check_invariants()


def test_eviction_disabled_raises(clock):
    mp = make_pool(clock, hbm=2, eviction=False)
    mp.insert(tuple(range(8)), mp.alloc_mem(2))
    with pytest.raises(OutOfMemory):
        mp.alloc_mem(1)


def test_swap_out_and_back_in(clock):
    mp = make_pool(clock, hbm=2, dram=2, swap_cost=0.5)
    tokens = tuple(range(8))
    addrs = mp.alloc_mem(2)
    mp.set_tags(addrs, block_tags(tokens, 4))
    mp.insert(tokens, addrs)
    mp.alloc_mem(2, owner=1)
    m = mp.match(tokens)
    assert m.media == [Medium.DRAM, Medium.DRAM]
    assert mp.drain_swap_time() == pytest.approx(1.0)
    assert mp.drain_swap_time() == 0.0

    mp.free_owned([BlockAddr("i0", Medium.HBM, i) for i in (0, 1)], owner=1)
    back = mp.swap_in(m.addrs)
    assert [a.medium for a in back] == [Medium.HBM, Medium.HBM]
    assert mp.match(tokens).addrs == back
    assert mp.tags(back) == block_tags(tokens, 4)
    assert mp.num_free(Medium.DRAM) == 2
    mp.check_invariants()


def test_release_blocks_allocated_by_remote_instance(clock):
    mp = make_pool(clock)
    mine = mp.alloc_mem(2, owner=1)
    remote = mp.alloc_mem(3, instance_id="p0", owner=2)
    freed = mp.release_blocks_allocated_by("p0")
    assert freed == remote
    assert mp.num_free() == 6
    assert all(a.block_index in mp.pools[Medium.HBM].allocated for a in mine)


def best_of(func, repeats=5):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        func()
        times.append(time.perf_counter() - start)
    return min(times)


@pytest.mark.slow
def test_insert_and_match_of_long_prompt_are_fast(clock):
    mp = make_pool(clock, hbm=4096)
    rng = np.random.default_rng(0)
    tokens = tuple(int(t) for t in rng.integers(0, 32000, size=4096))
    addrs = mp.alloc_mem(1024)
    start = time.perf_counter()
    mp.insert(tokens, addrs)
    assert time.perf_counter() - start < 0.05
    start = time.perf_counter()
    m = mp.match(tokens)
    assert time.perf_counter() - start < 0.05
    assert m.matched_tokens == 4096


@pytest.mark.slow
def test_alloc_and_free_scale_linearly(clock):
    sizes = [2**k for k in range(4, 15)]
    alloc_times, free_times = [], []
    for n in sizes:
        def alloc_free():
            mp = make_pool(clock, hbm=2**14)
            start = time.perf_counter()
            addrs = mp.alloc_mem(n)
            mid = time.perf_counter()
            mp.free_mem(addrs)
            end = time.perf_counter()
            return mid - start, end - mid

        samples = [alloc_free() for _ in range(5)]
        alloc_times.append(min(s[0] for s in samples))
        free_times.append(min(s[1] for s in samples))
    assert linregress(sizes, alloc_times).rvalue ** 2 > 0.95
    assert linregress(sizes, free_times).rvalue ** 2 > 0.95
