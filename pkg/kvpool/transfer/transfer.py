"""
Distributed data movement between instance memory pools.

A transfer runs in three steps: the receiver allocates blocks (skipped when the
sender already holds destination addresses), the sender transmits the planned
calls over the communicators of the instance pair, and the receiver acknowledges,
optionally inserting the received blocks into its index first. The engine only
plans and books the timeline; callers schedule the completion event and call
``complete`` when it fires.
"""

import itertools
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from kvpool.core.exceptions import AddrCountMismatch, DstOutOfMemory, DstUnreachable, OutOfMemory
from kvpool.core.types import (
    AllocType,
    BlockAddr,
    BlockConfig,
    Medium,
    ModelConfig,
    ParallelismConfig,
    TokenList,
    full_blocks,
    tokens_to_blocks,
)
from kvpool.core.utils.logging_utils import logger
from kvpool.mempool import MemPool, RadixNode
from kvpool.transfer.network import CommunicatorSet, NetworkModel
from kvpool.transfer.planning import TransferMode, plan_transfer

TRANSFER_RECORD_COLUMNS = [
    "transfer_id",
    "request_id",
    "kind",
    "mode",
    "src",
    "dst",
    "n_calls",
    "bytes",
    "start",
    "end",
    "status",
]


@dataclass
class TransferFlags:
    """insert_at_receiver makes the receiver index the received blocks;
    skip_alloc means the sender provides destination addresses;
    pin_at_receiver keeps the receiver's index path referenced after completion."""

    insert_at_receiver: bool = False
    skip_alloc: bool = False
    pin_at_receiver: bool = False


def _resolve_flags(flags: Optional[TransferFlags], dst_addrs, insert: bool) -> TransferFlags:
    """Copy of the caller's flags for one transfer. Destination addresses imply
    skip_alloc."""
    flags = flags if flags is not None else TransferFlags()
    return replace(
        flags, insert_at_receiver=insert, skip_alloc=flags.skip_alloc or dst_addrs is not None
    )


@dataclass
class ReceiverAllocation:
    """Result of the allocation step at the receiver.

    dst_addrs covers every block; blocks the receiver already indexed for the
    transferred tokens are reused and only send_indices need to be transmitted.
    """

    dst_instance: str
    dst_addrs: List[BlockAddr]
    send_indices: List[int]
    node: Optional[RadixNode] = None


@dataclass
class TransferHandle:
    transfer_id: int
    request_id: Optional[int]
    kind: str
    mode: TransferMode
    src: str
    dst: str
    src_addrs: List[BlockAddr]
    receiver: ReceiverAllocation
    tokens: Optional[TokenList]
    flags: TransferFlags
    private: Any
    n_calls: int
    bytes: float
    submit_time: float
    start_time: float
    end_time: float
    control_messages: int = 1
    aborted: bool = False
    completed: bool = False
    dst_addrs: List[BlockAddr] = field(default_factory=list)
    dst_node: Optional[RadixNode] = None

    @property
    def send_indices(self) -> List[int]:
        return self.receiver.send_indices


@dataclass
class TransferRecord:
    transfer_id: int
    request_id: Optional[int]
    kind: str
    mode: str
    src: str
    dst: str
    n_calls: int
    bytes: float
    start: float
    end: float
    status: str


class TransferEngine:
    """
    Plans and books transfers between the memory pools of a cluster.

    Parameters
    ----------
    network: NetworkModel
    model_cfg, block_cfg:
        Model and block layout, shared by all instances.
    pools: dict
        instance_id -> MemPool
    parallelism: dict
        instance_id -> ParallelismConfig
    is_reachable: callable
        Tells whether an instance currently answers messages.
    """

    def __init__(
        self,
        network: NetworkModel,
        model_cfg: ModelConfig,
        block_cfg: BlockConfig,
        pools: Dict[str, MemPool],
        parallelism: Optional[Dict[str, ParallelismConfig]] = None,
        is_reachable: Optional[Callable[[str], bool]] = None,
    ):
        self.network = network
        self.model_cfg = model_cfg
        self.block_cfg = block_cfg
        self.pools = pools
        self.parallelism = parallelism if parallelism is not None else {}
        self.is_reachable = is_reachable if is_reachable is not None else (lambda i: True)
        self.in_flight: Dict[int, TransferHandle] = {}
        self.records: List[TransferRecord] = []
        self._communicators: Dict[Tuple[str, str], CommunicatorSet] = {}
        self._ids = itertools.count()

    def communicators(self, src: str, dst: str) -> CommunicatorSet:
        key = (src, dst)
        if key not in self._communicators:
            self._communicators[key] = CommunicatorSet(self.network.communicators_per_pair)
        return self._communicators[key]

    def _check_reachable(self, *instance_ids):
        for instance_id in instance_ids:
            if instance_id not in self.pools or not self.is_reachable(instance_id):
                raise DstUnreachable(f"instance {instance_id} is unreachable")

    def _par(self, instance_id) -> ParallelismConfig:
        return self.parallelism.get(instance_id, ParallelismConfig())

    def call_duration(self, src, dst, bytes_per_call, layers, src_medium, dst_medium):
        return self.network.call_time(
            bytes_per_call,
            self.network.bandwidth(src_medium, dst_medium),
            self._par(src),
            self._par(dst),
            layers,
            self.model_cfg.num_layers,
        )

    def estimate_time(
        self,
        n_blocks: int,
        src: str,
        dst: str,
        mode: TransferMode,
        src_medium: Medium = Medium.HBM,
        with_allocation: bool = True,
    ) -> float:
        """Duration of a transfer of n_blocks on idle communicators, including the
        allocation round trip and the acknowledgement."""
        if n_blocks <= 0:
            return 0.0
        if mode == TransferMode.ByLayer:
            mode = TransferMode.ByRequest
        plan = plan_transfer(n_blocks * self.block_cfg.block_size, mode, self.block_cfg, self.model_cfg)
        c = self.network.communicators_per_pair
        busy = 0.0
        for g in plan.groups:
            duration = self.call_duration(src, dst, g.bytes_per_call, g.layers, src_medium, Medium.HBM)
            busy += -(-g.n_calls // c) * duration
        rtt = self.network.control_rtt
        return (rtt if with_allocation else 0.0) + busy + rtt / 2

    def allocate_at_receiver(
        self,
        src: str,
        dst: str,
        n_blocks: int,
        tokens: Optional[TokenList] = None,
        owner: Optional[int] = None,
    ) -> ReceiverAllocation:
        """
        Allocation step. With tokens, the receiver first matches them against its
        index and only allocates the blocks it does not hold in HBM; the matched
        path stays referenced until the transfer completes or is aborted.

        Raises
        ------
        DstOutOfMemory, DstUnreachable
        """
        self._check_reachable(dst)
        pool = self.pools[dst]
        matched: List[BlockAddr] = []
        node = None
        if tokens is not None:
            m = pool.match(tokens)
            for a in m.addrs[:n_blocks]:
                if a.medium != Medium.HBM:
                    break
                matched.append(a)
            if matched:
                node = m.node
                pool.lock(node)
        try:
            new = pool.alloc_mem(n_blocks - len(matched), AllocType.HBM, instance_id=src, owner=owner)
        except OutOfMemory as e:
            pool.unlock(node)
            raise DstOutOfMemory(str(e))
        return ReceiverAllocation(dst, matched + new, list(range(len(matched), n_blocks)), node)

    def _submit(
        self,
        src: str,
        dst: str,
        src_addrs: Sequence[BlockAddr],
        tokens: Optional[TokenList],
        dst_addrs,
        flags: TransferFlags,
        private: Any,
        now: float,
        mode: TransferMode,
        layer_finish_times: Optional[Sequence[float]],
        request_id: Optional[int],
        kind: str,
        not_before: float,
    ) -> TransferHandle:
        self._check_reachable(src, dst)
        n_blocks = len(src_addrs)
        if tokens is not None and n_blocks not in (
            full_blocks(len(tokens), self.block_cfg),
            tokens_to_blocks(len(tokens), self.block_cfg),
        ):
            raise AddrCountMismatch(
                f"{len(tokens)} tokens do not correspond to {n_blocks} blocks"
            )
        control_messages = 1
        if flags.skip_alloc:
            if dst_addrs is None:
                raise ValueError("skip_alloc needs destination addresses")
            if isinstance(dst_addrs, ReceiverAllocation):
                receiver = dst_addrs
            else:
                if len(dst_addrs) != n_blocks:
                    raise AddrCountMismatch(
                        f"{n_blocks} source blocks but {len(dst_addrs)} destination blocks"
                    )
                receiver = ReceiverAllocation(dst, list(dst_addrs), list(range(n_blocks)))
        else:
            receiver = self.allocate_at_receiver(
                src,
                dst,
                n_blocks,
                tokens if flags.insert_at_receiver else None,
                owner=request_id,
            )
            control_messages += 1
            not_before = max(not_before, now + self.network.control_rtt)
        ready = max(now, not_before)

        n_send = len(receiver.send_indices)
        if layer_finish_times is not None:
            layer_finish_times = [max(t, ready) for t in layer_finish_times]
        plan = plan_transfer(
            n_send * self.block_cfg.block_size,
            mode,
            self.block_cfg,
            self.model_cfg,
            layer_finish_times=layer_finish_times,
            ready_time=ready,
        )
        src_medium = (
            Medium.DRAM
            if any(src_addrs[i].medium == Medium.DRAM for i in receiver.send_indices)
            else Medium.HBM
        )
        dst_medium = (
            Medium.DRAM
            if any(receiver.dst_addrs[i].medium == Medium.DRAM for i in receiver.send_indices)
            else Medium.HBM
        )
        comms = self.communicators(src, dst)
        start, end = ready, ready
        first = float("inf")
        for g in plan.groups:
            duration = self.call_duration(src, dst, g.bytes_per_call, g.layers, src_medium, dst_medium)
            s, f = comms.schedule(g.earliest_start, g.n_calls, duration)
            first = min(first, s)
            end = max(end, f)
        if first != float("inf"):
            start = first

        handle = TransferHandle(
            transfer_id=next(self._ids),
            request_id=request_id,
            kind=kind,
            mode=plan.mode,
            src=src,
            dst=dst,
            src_addrs=list(src_addrs),
            receiver=receiver,
            tokens=tuple(tokens) if tokens is not None else None,
            flags=flags,
            private=private,
            n_calls=plan.n_calls,
            bytes=plan.bytes_total,
            submit_time=now,
            start_time=start,
            end_time=end + self.network.control_rtt / 2,
            control_messages=control_messages,
            dst_addrs=list(receiver.dst_addrs),
        )
        self.in_flight[handle.transfer_id] = handle
        logger.debug(
            f"transfer {handle.transfer_id} ({kind}) {src}->{dst}: {n_send}/{n_blocks} "
            f"blocks, {plan.n_calls} calls, done at {handle.end_time:.6f}"
        )
        return handle

    def transfer(
        self,
        src: str,
        dst: str,
        src_addrs: Sequence[BlockAddr],
        dst_addrs=None,
        flags: Optional[TransferFlags] = None,
        private: Any = None,
        *,
        now: float,
        mode: TransferMode = TransferMode.ByRequest,
        layer_finish_times: Optional[Sequence[float]] = None,
        request_id: Optional[int] = None,
        kind: str = "p2d",
        not_before: float = 0.0,
    ) -> TransferHandle:
        """
        Move src_addrs of instance src to instance dst.

        dst_addrs may be a list of pre-allocated destination addresses (the
        allocation step is skipped), a ReceiverAllocation from
        ``allocate_at_receiver``, or None.
        """
        flags = _resolve_flags(flags, dst_addrs, insert=False)
        return self._submit(
            src, dst, src_addrs, None, dst_addrs, flags, private, now, mode,
            layer_finish_times, request_id, kind, not_before,
        )

    def transfer_with_insert(
        self,
        src: str,
        dst: str,
        tokens: TokenList,
        src_addrs: Sequence[BlockAddr],
        dst_addrs=None,
        flags: Optional[TransferFlags] = None,
        private: Any = None,
        *,
        now: float,
        mode: TransferMode = TransferMode.ByRequest,
        layer_finish_times: Optional[Sequence[float]] = None,
        request_id: Optional[int] = None,
        kind: str = "p2d",
        not_before: float = 0.0,
    ) -> TransferHandle:
        """As transfer, then the receiver inserts (tokens, dst addrs) into its index
        before acknowledging. Without dst_addrs the receiver only allocates, and the
        sender only transmits, blocks the receiver does not already hold."""
        flags = _resolve_flags(flags, dst_addrs, insert=True)
        return self._submit(
            src, dst, src_addrs, tokens, dst_addrs, flags, private, now, mode,
            layer_finish_times, request_id, kind, not_before,
        )

    def _record(self, handle: TransferHandle, status: str, end: Optional[float] = None):
        self.records.append(
            TransferRecord(
                transfer_id=handle.transfer_id,
                request_id=handle.request_id,
                kind=handle.kind,
                mode=handle.mode.value,
                src=handle.src,
                dst=handle.dst,
                n_calls=handle.n_calls,
                bytes=handle.bytes,
                start=handle.start_time,
                end=handle.end_time if end is None else end,
                status=status,
            )
        )

    def complete(self, handle: TransferHandle, now: float) -> bool:
        """
        Finish a transfer whose completion time has come: copy content tags, hand
        the blocks to the receiver and, for inserting transfers, index them.

        Returns False if the transfer was aborted meanwhile.

        Raises
        ------
        DstUnreachable if either side stopped answering; the transfer is aborted.
        """
        if handle.aborted or handle.completed:
            return False
        try:
            self._check_reachable(handle.src, handle.dst)
        except DstUnreachable:
            self.abort(handle, now)
            raise
        src_pool, dst_pool = self.pools[handle.src], self.pools[handle.dst]
        sent_src = [handle.src_addrs[i] for i in handle.send_indices]
        sent_dst = [handle.receiver.dst_addrs[i] for i in handle.send_indices]
        dst_pool.set_tags(sent_dst, src_pool.tags(sent_src))
        dst_pool.set_owner(sent_dst, handle.request_id)

        node = handle.receiver.node
        if handle.flags.insert_at_receiver:
            result = dst_pool.insert(handle.tokens, handle.receiver.dst_addrs)
            handle.dst_addrs = result.addrs + handle.receiver.dst_addrs[len(result.addrs):]
            dst_pool.lock(result.node)
            dst_pool.unlock(node)
            node = result.node
        if handle.flags.pin_at_receiver:
            handle.dst_node = node
        else:
            dst_pool.unlock(node)
        handle.completed = True
        del self.in_flight[handle.transfer_id]
        self._record(handle, "done")
        return True

    def insert_remote(
        self, dst: str, tokens: TokenList, dst_addrs: Sequence[BlockAddr], now: float
    ):
        """Separate insert message after a plain transfer. Costs one extra control
        round trip. Returns (InsertResult, time the insert is acknowledged)."""
        self._check_reachable(dst)
        result = self.pools[dst].insert(tokens, dst_addrs)
        return result, now + self.network.control_rtt

    def abort(self, handle: TransferHandle, now: float):
        """Abort an in-flight transfer and release what the receiver set aside."""
        if handle.aborted or handle.completed:
            return
        handle.aborted = True
        self.in_flight.pop(handle.transfer_id, None)
        dst_pool = self.pools.get(handle.dst)
        if dst_pool is not None and self.is_reachable(handle.dst):
            dst_pool.unlock(handle.receiver.node)
            if handle.request_id is not None:
                dst_pool.free_owned(
                    [handle.receiver.dst_addrs[i] for i in handle.send_indices],
                    handle.request_id,
                )
        self._record(handle, "aborted", end=now)

    def abort_instance(self, instance_id: str, now: float) -> List[TransferHandle]:
        """Abort every in-flight transfer from or to instance_id."""
        aborted = [
            h for h in list(self.in_flight.values()) if instance_id in (h.src, h.dst)
        ]
        for h in aborted:
            self.abort(h, now)
        return aborted
