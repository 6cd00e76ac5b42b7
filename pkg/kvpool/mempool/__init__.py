from .block_pool import BlockMeta, BlockPool
from .radix_index import RadixIndex, RadixNode
from .mempool import (
    InsertResult,
    MatchResult,
    MemPool,
    MemPoolConfig,
    build_mempool_config,
)
