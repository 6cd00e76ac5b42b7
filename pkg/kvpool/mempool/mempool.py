"""
Elastic memory pool of one instance: HBM and DRAM block pools plus the radix index
over historical KV cache, with swapping and LRU eviction.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from kvpool.core.exceptions import InvalidAddr, NoDramCapacity, OutOfMemory
from kvpool.core.types import AllocType, BlockAddr, BlockConfig, Medium, TokenList, parse_enum
from kvpool.core.utils.logging_utils import logger
from kvpool.mempool.block_pool import BlockMeta, BlockPool
from kvpool.mempool.radix_index import RadixIndex, RadixNode


@dataclass(frozen=True)
class MemPoolConfig:
    eviction: bool = True
    swap: bool = True


def build_mempool_config(settings: dict) -> MemPoolConfig:
    section = settings.get("mempool", {})
    return MemPoolConfig(
        eviction=bool(section.get("eviction", True)), swap=bool(section.get("swap", True))
    )


@dataclass
class MatchResult:
    matched_tokens: int
    addrs: List[BlockAddr]
    node: Optional[RadixNode] = None

    @property
    def media(self) -> List[Medium]:
        return [a.medium for a in self.addrs]

    @property
    def n_blocks(self) -> int:
        return len(self.addrs)


@dataclass
class InsertResult:
    addrs: List[BlockAddr]
    freed_duplicates: List[BlockAddr]
    node: RadixNode


class MemPool:
    """
    Per-instance memory pool.

    Parameters
    ----------
    instance_id: str
    block_cfg: BlockConfig
    hbm_capacity: int
        Number of HBM blocks.
    dram_capacity: int
        Number of DRAM blocks. Zero disables swapping.
    config: MemPoolConfig
        Enables or disables eviction and swap-out on allocation pressure.
    clock: callable
        Returns current simulated time.
    swap_cost_per_block: float
        Simulated seconds charged per block moved between HBM and DRAM. Charges
        accumulate in ``pending_swap_time`` until the engine drains them.
    """

    def __init__(
        self,
        instance_id: str,
        block_cfg: BlockConfig,
        hbm_capacity: int,
        dram_capacity: int = 0,
        config: Optional[MemPoolConfig] = None,
        clock: Optional[Callable[[], float]] = None,
        swap_cost_per_block: float = 0.0,
    ):
        self.instance_id = instance_id
        self.block_cfg = block_cfg
        self.config = config if config is not None else MemPoolConfig()
        self.clock = clock if clock is not None else (lambda: 0.0)
        self.swap_cost_per_block = swap_cost_per_block
        self.pools: Dict[Medium, BlockPool] = {
            Medium.HBM: BlockPool(instance_id, Medium.HBM, hbm_capacity),
            Medium.DRAM: BlockPool(instance_id, Medium.DRAM, dram_capacity),
        }
        self.index = RadixIndex(block_cfg.block_size, self.clock, instance_id)
        self.pending_swap_time = 0.0

    def __repr__(self):
        return f"MemPool({self.instance_id}, {self.pools[Medium.HBM]}, {self.pools[Medium.DRAM]})"

    def num_free(self, medium: Medium = Medium.HBM) -> int:
        return self.pools[medium].num_free

    def _addrs(self, medium: Medium, indices: Sequence[int]) -> List[BlockAddr]:
        return [BlockAddr(self.instance_id, medium, i) for i in indices]

    def _check_own(self, addrs: Sequence[BlockAddr]):
        for a in addrs:
            if a.instance_id != self.instance_id:
                raise InvalidAddr(f"{a} does not belong to instance {self.instance_id}")

    def meta(self, addr: BlockAddr) -> BlockMeta:
        self._check_own([addr])
        try:
            return self.pools[addr.medium].allocated[addr.block_index]
        except KeyError:
            raise InvalidAddr(f"{addr} is not allocated")

    def drain_swap_time(self) -> float:
        t, self.pending_swap_time = self.pending_swap_time, 0.0
        return t

    # Allocation

    def _make_room(self, medium: Medium, n_blocks: int):
        """Free HBM (swap out, then evict) or DRAM (evict) until n_blocks are free."""
        pool = self.pools[medium]
        short = n_blocks - pool.num_free
        if short <= 0:
            return
        if (
            medium == Medium.HBM
            and self.config.swap
            and self.pools[Medium.DRAM].capacity > 0
        ):
            try:
                self.swap_out(short)
            except NoDramCapacity:
                pass
            short = n_blocks - pool.num_free
        if short > 0 and self.config.eviction:
            self.evict(short, medium)

    def alloc_mem(
        self,
        n_blocks: int,
        alloc_type=AllocType.HBM,
        instance_id: Optional[str] = None,
        owner: Optional[int] = None,
    ) -> List[BlockAddr]:
        """
        Allocate exactly n_blocks blocks.

        HBM and DRAM allocations make room by swapping and evicting unreferenced
        historical blocks first. Mixed takes free HBM, then DRAM, then makes room
        in HBM. The caller (instance_id, defaults to this instance) is recorded as
        allocating instance of every block.

        Raises
        ------
        OutOfMemory if the blocks can not be found.
        """
        alloc_type = parse_enum(AllocType, alloc_type)
        caller = instance_id if instance_id is not None else self.instance_id
        if n_blocks <= 0:
            return []
        hbm, dram = self.pools[Medium.HBM], self.pools[Medium.DRAM]
        if alloc_type == AllocType.HBM:
            self._make_room(Medium.HBM, n_blocks)
            return self._addrs(Medium.HBM, hbm.alloc(n_blocks, caller, owner))
        if alloc_type == AllocType.DRAM:
            self._make_room(Medium.DRAM, n_blocks)
            return self._addrs(Medium.DRAM, dram.alloc(n_blocks, caller, owner))

        n_hbm = min(n_blocks, hbm.num_free)
        n_dram = n_blocks - n_hbm
        if n_dram > dram.num_free:
            self._make_room(Medium.DRAM, n_dram)
        if n_dram > dram.num_free:
            n_dram = dram.num_free
            n_hbm = n_blocks - n_dram
            self._make_room(Medium.HBM, n_hbm)
            if n_hbm > hbm.num_free:
                raise OutOfMemory(
                    f"{self.instance_id}: can not allocate {n_blocks} blocks of any medium"
                )
        return self._addrs(Medium.HBM, hbm.alloc(n_hbm, caller, owner)) + self._addrs(
            Medium.DRAM, dram.alloc(n_dram, caller, owner)
        )

    def free_mem(self, addrs: Sequence[BlockAddr]):
        """Return non-indexed blocks to their free lists."""
        self._check_own(addrs)
        for a in addrs:
            if a in self.index:
                raise InvalidAddr(f"{a} is indexed; use delete or evict to release it")
        by_medium: Dict[Medium, List[int]] = {Medium.HBM: [], Medium.DRAM: []}
        for a in addrs:
            by_medium[a.medium].append(a.block_index)
        for medium, indices in by_medium.items():
            self.pools[medium].check_allocated(indices)
        for medium, indices in by_medium.items():
            self.pools[medium].free(indices)

    def free_owned(self, addrs: Sequence[BlockAddr], owner: int) -> List[BlockAddr]:
        """Free the blocks of addrs that are still allocated and owned by owner."""
        freed = []
        for a in addrs:
            if a.instance_id != self.instance_id or a in self.index:
                continue
            meta = self.pools[a.medium].allocated.get(a.block_index)
            if meta is not None and meta.owner == owner:
                freed.append(a)
        if freed:
            self.free_mem(freed)
        return freed

    def set_owner(self, addrs: Sequence[BlockAddr], owner: Optional[int]):
        for a in addrs:
            meta = self.meta(a)
            meta.owner = owner
            meta.allocating_instance = self.instance_id

    def set_tags(self, addrs: Sequence[BlockAddr], tags: Sequence[str]):
        for a, tag in zip(addrs, tags):
            self.meta(a).content_tag = tag

    def tags(self, addrs: Sequence[BlockAddr]) -> List[Optional[str]]:
        return [self.meta(a).content_tag for a in addrs]

    def release_blocks_allocated_by(self, instance_id: str) -> List[BlockAddr]:
        """Free every non-indexed block whose allocating instance is instance_id."""
        freed = []
        for medium, pool in self.pools.items():
            for idx, meta in sorted(pool.allocated.items()):
                addr = BlockAddr(self.instance_id, medium, idx)
                if meta.allocating_instance == instance_id and addr not in self.index:
                    freed.append(addr)
        if freed:
            self.free_mem(freed)
            logger.debug(
                f"{self.instance_id}: released {len(freed)} blocks allocated by {instance_id}"
            )
        return freed

    # Index

    def insert(
        self, tokens: TokenList, addrs: Sequence[BlockAddr], on_conflict="keep_existing"
    ) -> InsertResult:
        """
        Index the full blocks of tokens. Newly indexed blocks become historical and
        locally owned; caller blocks duplicating already indexed ones are freed.
        """
        self._check_own(addrs)
        result = self.index.insert(tokens, addrs, on_conflict)
        for a in result.values:
            meta = self.meta(a)
            meta.historical = True
            meta.owner = None
            meta.allocating_instance = self.instance_id
        if result.duplicates:
            self.free_mem(result.duplicates)
        return InsertResult(list(result.values), list(result.duplicates), result.node)

    def match(self, tokens: TokenList) -> MatchResult:
        m = self.index.match(tokens)
        return MatchResult(m.n_blocks * self.block_cfg.block_size, list(m.values), m.node)

    def delete(self, tokens: TokenList) -> List[BlockAddr]:
        removed = self.index.delete(tokens)
        self._free_removed(removed)
        return removed

    def _free_removed(self, removed: Sequence[BlockAddr]):
        by_medium: Dict[Medium, List[int]] = {Medium.HBM: [], Medium.DRAM: []}
        for a in removed:
            by_medium[a.medium].append(a.block_index)
        for medium, indices in by_medium.items():
            self.pools[medium].free(indices)

    def evict(self, n_blocks: int, medium: Medium = Medium.HBM) -> List[BlockAddr]:
        """Free up to n_blocks historical blocks of medium in LRU order."""
        removed = self.index.evict(n_blocks, accept=lambda a: a.medium == medium)
        self._free_removed(removed)
        if removed:
            logger.debug(f"{self.instance_id}: evicted {len(removed)} blocks")
        return removed

    def lock(self, node: Optional[RadixNode]):
        if node is not None:
            self.index.lock(node)

    def unlock(self, node: Optional[RadixNode]):
        if node is not None:
            self.index.unlock(node)

    # Swapping

    def _swap_candidates(self) -> List[BlockAddr]:
        """Unreferenced historical HBM blocks, least recently used first; within a
        node, tail blocks first."""
        nodes = [n for n in self.index.iter_nodes() if n.ref_count == 0]
        nodes.sort(key=lambda n: (n.last_access, n.node_id))
        return [
            a for n in nodes for a in reversed(n.values) if a.medium == Medium.HBM
        ]

    def swap_out(self, n_blocks: int) -> List[Tuple[BlockAddr, BlockAddr]]:
        """
        Move up to n_blocks unreferenced historical blocks from HBM to DRAM.

        Returns
        -------
        list of (old HBM addr, new DRAM addr)

        Raises
        ------
        NoDramCapacity if there is something to move but DRAM stays full after
        evicting from it.
        """
        candidates = self._swap_candidates()[:n_blocks]
        if not candidates:
            return []
        dram = self.pools[Medium.DRAM]
        if dram.num_free < len(candidates) and self.config.eviction:
            self.evict(len(candidates) - dram.num_free, Medium.DRAM)
        # DRAM eviction may have touched candidates that had a DRAM tail
        candidates = [a for a in candidates if a in self.index][: dram.num_free]
        if not candidates:
            raise NoDramCapacity(f"{self.instance_id}: DRAM is full")
        new = self._addrs(
            Medium.DRAM, dram.alloc(len(candidates), self.instance_id, owner=None)
        )
        moved = self._move(candidates, new)
        return moved

    def swap_in(self, addrs: Sequence[BlockAddr]) -> List[BlockAddr]:
        """
        Move DRAM blocks of this instance to freshly allocated HBM blocks.

        Returns the new HBM addresses, aligned with addrs.
        """
        self._check_own(addrs)
        for a in addrs:
            if a.medium != Medium.DRAM:
                raise InvalidAddr(f"swap_in needs DRAM blocks, got {a}")
            self.meta(a)
        if not addrs:
            return []
        nodes = [self.index.node_of(a) for a in addrs]
        for n in nodes:
            self.lock(n)
        try:
            self._make_room(Medium.HBM, len(addrs))
            new = self._addrs(
                Medium.HBM,
                self.pools[Medium.HBM].alloc(len(addrs), self.instance_id, owner=None),
            )
        finally:
            for n in nodes:
                self.unlock(n)
        self._move(list(addrs), new)
        return new

    def _move(self, old: Sequence[BlockAddr], new: Sequence[BlockAddr]):
        moved = []
        for a, b in zip(old, new):
            src = self.meta(a)
            dst = self.meta(b)
            dst.content_tag = src.content_tag
            dst.owner = src.owner
            dst.historical = src.historical
            dst.allocating_instance = src.allocating_instance
            if a in self.index:
                self.index.replace_value(a, b)
            self.pools[a.medium].free([a.block_index])
            moved.append((a, b))
        self.pending_swap_time += len(moved) * self.swap_cost_per_block
        return moved

    # Invariants and debugging

    def check_invariants(self):
        for pool in self.pools.values():
            pool.check_conservation()
        for node in self.index.iter_nodes():
            for a in node.values:
                assert a.block_index in self.pools[a.medium].allocated, (
                    f"index references free block {a}"
                )

    def dump(self) -> List[str]:
        return self.index.dump()
