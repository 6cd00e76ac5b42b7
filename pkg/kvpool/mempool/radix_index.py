"""
Block-granular radix tree over token sequences.

Each node stores a segment of tokens whose length is a multiple of the block size,
together with one payload per block (a BlockAddr for instance pools, None for the
scheduler's advisory trees). Children are keyed by their leading block, so split
points always fall on block boundaries and siblings start with distinct blocks.
Trailing partial blocks are never indexed.
"""

import heapq
import itertools
from typing import Any, Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence

from kvpool.core.exceptions import AddrCountMismatch, ConflictingMapping


class RadixNode:
    __slots__ = (
        "node_id",
        "key",
        "values",
        "children",
        "parent",
        "ref_count",
        "last_access",
        "insert_time",
        "holder_instance",
    )

    def __init__(self, node_id, key=(), values=None, parent=None, now=0.0, holder=None):
        self.node_id = node_id
        self.key = tuple(key)
        self.values = list(values) if values is not None else []
        self.children: Dict[tuple, "RadixNode"] = {}
        self.parent = parent
        self.ref_count = 0
        self.last_access = now
        self.insert_time = now
        self.holder_instance = holder

    def __repr__(self):
        return (
            f"RadixNode(id={self.node_id}, blocks={len(self.values)}, "
            f"ref={self.ref_count}, last_access={self.last_access})"
        )

    @property
    def is_leaf(self) -> bool:
        return not self.children


class IndexMatch(NamedTuple):
    n_blocks: int
    values: List[Any]
    node: RadixNode


class IndexInsert(NamedTuple):
    values: List[Any]
    duplicates: List[Any]
    node: RadixNode


class RadixIndex:
    """
    Prefix tree mapping block-aligned token prefixes to per-block payloads.

    Parameters
    ----------
    block_size: int
        Tokens per block, B.
    clock: callable
        Returns the current simulated time; used for last_access and insert_time.
    holder_instance: str
        Recorded on every node; the instance that holds the indexed data.
    """

    def __init__(
        self,
        block_size: int,
        clock: Optional[Callable[[], float]] = None,
        holder_instance: Optional[str] = None,
    ):
        if block_size < 1:
            raise ValueError(f"block_size must be positive, got {block_size}")
        self.block_size = block_size
        self.clock = clock if clock is not None else (lambda: 0.0)
        self.holder_instance = holder_instance
        self._ids = itertools.count()
        self.root = RadixNode(next(self._ids), holder=holder_instance)
        self._value_to_node: Dict[Any, RadixNode] = {}

    def _new_node(self, key, values, parent, now):
        node = RadixNode(
            next(self._ids), key, values, parent, now, holder=self.holder_instance
        )
        parent.children[node.key[: self.block_size]] = node
        for v in node.values:
            if v is not None:
                self._value_to_node[v] = node
        return node

    def _common_blocks(self, key: tuple, tokens: tuple, start: int) -> int:
        B = self.block_size
        n = min(len(key), len(tokens) - start) // B
        k = 0
        while k < n and key[k * B : (k + 1) * B] == tokens[start + k * B : start + (k + 1) * B]:
            k += 1
        return k

    def _split(self, node: RadixNode, n_blocks: int) -> RadixNode:
        """Split node after n_blocks blocks and return the new upper node."""
        B = self.block_size
        parent = node.parent
        upper = RadixNode(
            next(self._ids),
            node.key[: n_blocks * B],
            node.values[:n_blocks],
            parent,
            node.last_access,
            holder=node.holder_instance,
        )
        upper.insert_time = node.insert_time
        upper.ref_count = node.ref_count
        parent.children[upper.key[:B]] = upper
        node.key = node.key[n_blocks * B :]
        node.values = node.values[n_blocks:]
        node.parent = upper
        upper.children[node.key[:B]] = node
        for v in upper.values:
            if v is not None:
                self._value_to_node[v] = upper
        return upper

    def match(
        self, tokens: Sequence[int], expired_before: Optional[float] = None, touch=True
    ) -> IndexMatch:
        """
        Longest stored block-aligned prefix of tokens.

        Parameters
        ----------
        tokens: sequence of int
        expired_before: float, optional
            Nodes inserted before this time are treated as absent.
        touch: bool
            Update last_access along the matched path.
        """
        B = self.block_size
        tokens = tuple(tokens)
        n_full = len(tokens) // B
        now = self.clock() if touch else None
        node = self.root
        values = []
        i = 0
        while i < n_full:
            child = node.children.get(tokens[i * B : (i + 1) * B])
            if child is None:
                break
            if expired_before is not None and child.insert_time < expired_before:
                break
            k = self._common_blocks(child.key, tokens, i * B)
            values.extend(child.values[:k])
            if touch:
                child.last_access = now
            node = child
            i += k
            if k < len(child.values):
                break
        return IndexMatch(i, values, node)

    def insert(
        self, tokens: Sequence[int], values: Sequence[Any], on_conflict: str = "keep_existing"
    ) -> IndexInsert:
        """
        Index the full blocks of tokens with one payload per block.

        values may cover only the full blocks, or all blocks including a trailing
        partial one (whose payload is ignored). Where a block is already indexed
        with a different payload, the existing payload is kept and the new one is
        reported in ``duplicates``; with on_conflict="error" a ConflictingMapping is
        raised instead and the index is left unchanged.
        """
        if on_conflict not in ("keep_existing", "error"):
            raise ValueError(f"on_conflict {on_conflict!r} not understood")
        B = self.block_size
        tokens = tuple(tokens)
        n_full = len(tokens) // B
        n_total = -(-len(tokens) // B)
        if len(values) not in (n_full, n_total):
            raise AddrCountMismatch(
                f"{len(tokens)} tokens need {n_full} (or {n_total}) addresses, "
                f"got {len(values)}"
            )
        values = list(values[:n_full])

        if on_conflict == "error":
            existing = self.match(tokens, touch=False).values
            for old, new in zip(existing, values):
                if old != new:
                    raise ConflictingMapping(
                        f"block already indexed as {old}, refusing to map it to {new}"
                    )

        now = self.clock()
        node = self.root
        canonical = []
        duplicates = []
        i = 0
        while i < n_full:
            first = tokens[i * B : (i + 1) * B]
            child = node.children.get(first)
            if child is None:
                node = self._new_node(tokens[i * B : n_full * B], values[i:], node, now)
                canonical.extend(values[i:])
                break
            k = self._common_blocks(child.key, tokens, i * B)
            if k < len(child.values):
                child = self._split(child, k)
            for old, new in zip(child.values, values[i : i + k]):
                canonical.append(old)
                if new is not None and new != old:
                    duplicates.append(new)
            child.last_access = now
            child.insert_time = now
            node = child
            i += k
        return IndexInsert(canonical, duplicates, node)

    def _unlink(self, node: RadixNode):
        del node.parent.children[node.key[: self.block_size]]
        for v in node.values:
            self._value_to_node.pop(v, None)

    def delete(self, tokens: Sequence[int]) -> List[Any]:
        """
        Unlink the stored sequence ending exactly at the block-aligned length of
        tokens. Ancestors left childless are removed too. Pinned nodes and sequences
        that are prefixes of longer stored ones stay. Returns removed payloads.
        """
        B = self.block_size
        tokens = tuple(tokens)
        n_full = len(tokens) // B
        node = self.root
        i = 0
        while i < n_full:
            child = node.children.get(tokens[i * B : (i + 1) * B])
            if child is None:
                return []
            k = self._common_blocks(child.key, tokens, i * B)
            if k < len(child.values):
                return []
            node = child
            i += k
        if node is self.root or node.children or node.ref_count > 0:
            return []
        removed = []
        while node is not self.root and not node.children and node.ref_count == 0:
            parent = node.parent
            self._unlink(node)
            removed.extend(node.values)
            node = parent
        return removed

    def prune_inserted_before(self, expired_before: float) -> List[Any]:
        """
        Unlink every unpinned subtree whose top node was inserted before
        expired_before. Inserting refreshes the whole path, so no node is newer
        than its parent. Returns removed payloads.
        """
        removed = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            for first, child in sorted(node.children.items()):
                if child.insert_time >= expired_before or child.ref_count > 0:
                    stack.append(child)
                    continue
                del node.children[first]
                dropped = [child]
                while dropped:
                    n = dropped.pop()
                    for v in n.values:
                        self._value_to_node.pop(v, None)
                    removed.extend(n.values)
                    dropped.extend(n.children.values())
        return removed

    def evictable_leaves(self) -> List[RadixNode]:
        return [
            n for n in self.iter_nodes() if n.is_leaf and n.ref_count == 0 and n.values
        ]

    def evict(self, n_blocks: int, accept: Optional[Callable[[Any], bool]] = None) -> List[Any]:
        """
        Remove up to n_blocks payloads from unpinned leaves in LRU order.

        Blocks are trimmed from the tail of the least recently accessed leaf; a leaf
        that becomes empty is unlinked and its parent becomes a candidate. Only
        payloads for which accept(payload) is true count towards n_blocks, but every
        trimmed payload is returned.
        """
        if n_blocks <= 0:
            return []
        B = self.block_size
        heap = [(n.last_access, n.node_id, n) for n in self.evictable_leaves()]
        heapq.heapify(heap)
        removed = []
        counted = 0
        while counted < n_blocks and heap:
            _, _, leaf = heapq.heappop(heap)
            first = leaf.key[:B]
            while leaf.values and counted < n_blocks:
                v = leaf.values.pop()
                leaf.key = leaf.key[:-B]
                self._value_to_node.pop(v, None)
                removed.append(v)
                if accept is None or accept(v):
                    counted += 1
            if not leaf.values:
                parent = leaf.parent
                del parent.children[first]
                if parent is not self.root and parent.is_leaf and parent.ref_count == 0:
                    heapq.heappush(heap, (parent.last_access, parent.node_id, parent))
        return removed

    def lock(self, node: RadixNode):
        while node is not None and node is not self.root:
            node.ref_count += 1
            node = node.parent

    def unlock(self, node: RadixNode):
        while node is not None and node is not self.root:
            if node.ref_count <= 0:
                raise ValueError(f"unbalanced unlock of {node}")
            node.ref_count -= 1
            node = node.parent

    def node_of(self, value) -> Optional[RadixNode]:
        return self._value_to_node.get(value)

    def __contains__(self, value) -> bool:
        return value in self._value_to_node

    def replace_value(self, old, new):
        node = self._value_to_node.pop(old)
        node.values[node.values.index(old)] = new
        self._value_to_node[new] = node

    def iter_nodes(self) -> Iterator[RadixNode]:
        """Depth-first over all nodes except the root, children in key order."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node is not self.root:
                yield node
            for key in sorted(node.children, reverse=True):
                stack.append(node.children[key])

    def depth_of(self, node: RadixNode) -> int:
        """Number of blocks from the root to the end of node."""
        depth = 0
        while node is not None and node is not self.root:
            depth += len(node.values)
            node = node.parent
        return depth

    @property
    def num_blocks(self) -> int:
        return sum(len(n.values) for n in self.iter_nodes())

    def dump(self, render: Callable[[Any], str] = str) -> List[str]:
        """Deterministic text rendering: one line per node, depth-first by key."""
        B = self.block_size
        lines = []
        stack = [(self.root, 0, 0)]
        while stack:
            node, start, depth = stack.pop()
            if node is not self.root:
                end = start + len(node.key)
                lines.append(
                    f"{'  ' * (depth - 1)}[{start}:{end}] first={node.key[0]} "
                    f"blocks=[{', '.join(render(v) for v in node.values)}] "
                    f"holder={node.holder_instance} ref={node.ref_count} "
                    f"last_access={node.last_access:.6f}"
                )
                start = end
            for key in sorted(node.children, reverse=True):
                stack.append((node.children[key], start, depth + 1))
        return lines
