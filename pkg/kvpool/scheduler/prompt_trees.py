from typing import Callable, Dict, Iterable, Optional

from kvpool.core.types import InstanceKind, TokenList
from kvpool.mempool import RadixIndex


class GlobalPromptTrees:
    """
    Scheduler-side view of which instance holds which prompt prefixes.

    One radix tree per instance, grouped by instance kind. Trees store no
    addresses, only prefixes; entries older than ttl are ignored by matches and
    dropped on the next update. The trees are advisory and may be stale.

    Parameters
    ----------
    block_size: int
    ttl: float
        Entry lifetime in simulated seconds.
    clock: callable
        Returns the current simulated time.
    """

    def __init__(self, block_size: int, ttl: float = 300.0, clock: Optional[Callable[[], float]] = None):
        if ttl <= 0:
            raise ValueError(f"ttl must be positive, got {ttl}")
        self.block_size = block_size
        self.ttl = ttl
        self.clock = clock if clock is not None else (lambda: 0.0)
        self.trees: Dict[InstanceKind, Dict[str, RadixIndex]] = {k: {} for k in InstanceKind}

    def tree(self, instance_id: str, kind: InstanceKind) -> RadixIndex:
        trees = self.trees[kind]
        if instance_id not in trees:
            trees[instance_id] = RadixIndex(self.block_size, self.clock, instance_id)
        return trees[instance_id]

    def update_trees(self, instance_id: str, kind: InstanceKind, tokens: TokenList):
        """Record that instance_id now caches the block-aligned prefix of tokens, and
        drop entries that outlived the ttl from every tree."""
        tokens = tuple(tokens)
        n_full = len(tokens) // self.block_size
        if n_full > 0:
            self.tree(instance_id, kind).insert(tokens, [None] * n_full)
        self.prune_expired()

    def prune_expired(self) -> int:
        """Remove entries older than ttl. Returns the number of blocks removed."""
        expired_before = self.clock() - self.ttl
        removed = 0
        for trees in self.trees.values():
            for tree in trees.values():
                removed += len(tree.prune_inserted_before(expired_before))
        return removed

    def match_global(
        self, tokens: TokenList, kind: InstanceKind, instances: Optional[Iterable[str]] = None
    ) -> Dict[str, int]:
        """
        Non-expired matched prefix length, in tokens, per instance of kind.

        Parameters
        ----------
        instances: iterable of str, optional
            Restrict the answer to these instances; instances without a tree get 0.
        """
        expired_before = self.clock() - self.ttl
        trees = self.trees[kind]
        ids = sorted(trees) if instances is None else list(instances)
        result = {}
        for instance_id in ids:
            tree = trees.get(instance_id)
            if tree is None:
                result[instance_id] = 0
                continue
            m = tree.match(tokens, expired_before=expired_before, touch=False)
            result[instance_id] = m.n_blocks * self.block_size
        return result

    def purge_instance(self, instance_id: str):
        for trees in self.trees.values():
            trees.pop(instance_id, None)
