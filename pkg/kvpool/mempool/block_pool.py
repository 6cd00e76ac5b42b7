import heapq
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

from kvpool.core.exceptions import DoubleFree, InvalidAddr, OutOfMemory
from kvpool.core.types import Medium


@dataclass
class BlockMeta:
    """Bookkeeping of one allocated block.

    owner is the request the block belongs to, or None once the block is
    historical (indexed). allocating_instance is the instance that asked for the
    block, which differs from the pool's instance for remote allocations.
    """

    owner: Optional[int]
    allocating_instance: str
    content_tag: Optional[str] = None
    historical: bool = False


class BlockPool:
    """
    Fixed-size block allocator for one medium of one instance.

    Free blocks are handed out lowest index first, so a fresh pool allocates
    0, 1, 2, ... .
    """

    def __init__(self, instance_id: str, medium: Medium, capacity: int):
        if capacity < 0:
            raise ValueError(f"capacity must be non-negative, got {capacity}")
        self.instance_id = instance_id
        self.medium = Medium(medium)
        self.capacity = capacity
        self._free = list(range(capacity))
        self.allocated: Dict[int, BlockMeta] = {}

    def __repr__(self):
        return (
            f"BlockPool({self.instance_id}:{self.medium.value}, "
            f"free={self.num_free}/{self.capacity})"
        )

    @property
    def num_free(self) -> int:
        return len(self._free)

    @property
    def num_allocated(self) -> int:
        return len(self.allocated)

    @property
    def free_list(self) -> List[int]:
        return sorted(self._free)

    def alloc(
        self, n_blocks: int, allocating_instance: str, owner: Optional[int] = None
    ) -> List[int]:
        if n_blocks > len(self._free):
            raise OutOfMemory(
                f"{self.instance_id}:{self.medium.value} has {len(self._free)} free "
                f"blocks, {n_blocks} requested"
            )
        indices = [heapq.heappop(self._free) for _ in range(n_blocks)]
        for idx in indices:
            self.allocated[idx] = BlockMeta(
                owner=owner, allocating_instance=allocating_instance
            )
        return indices

    def check_allocated(self, indices: Iterable[int]):
        seen = set()
        for idx in indices:
            if not 0 <= idx < self.capacity:
                raise InvalidAddr(
                    f"block {idx} out of range for {self.instance_id}:"
                    f"{self.medium.value} (capacity {self.capacity})"
                )
            if idx not in self.allocated or idx in seen:
                raise DoubleFree(
                    f"block {idx} of {self.instance_id}:{self.medium.value} is not allocated"
                )
            seen.add(idx)

    def free(self, indices: Iterable[int]):
        indices = list(indices)
        self.check_allocated(indices)
        for idx in indices:
            del self.allocated[idx]
            heapq.heappush(self._free, idx)

    def check_conservation(self):
        assert len(self._free) + len(self.allocated) == self.capacity
        assert not set(self._free) & set(self.allocated)
