"""
Simulated inference instance.

An instance is an actor driven by the simulator's event loop. It owns a memory
pool, a prefill queue and a decode set, and runs at most one batch (prefill or
decode) at a time. The host (the simulator) provides the clock, event scheduling,
the transfer engine, and request-level bookkeeping.
"""

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from kvpool.core.exceptions import DstOutOfMemory, DstUnreachable, OutOfMemory
from kvpool.core.types import (
    AllocType,
    BlockAddr,
    CachingDesign,
    InstanceKind,
    InstanceSpec,
    Medium,
    block_tags,
    tokens_to_blocks,
)
from kvpool.core.utils.logging_utils import logger
from kvpool.engine.batching import admit_batch
from kvpool.engine.cost_model import CachedLocation, CostModel, ReuseDecision
from kvpool.engine.state import Phase, RequestState
from kvpool.mempool import MatchResult, MemPool
from kvpool.transfer import TransferFlags, TransferMode, bulk_mode


def transfer_metadata(request) -> dict:
    """Private metadata travelling with a transfer of the request's KV cache."""
    return {
        "request_id": request.request_id,
        "sampling_params": dict(request.sampling_params),
        "prompt": tuple(request.prompt),
    }


@dataclass
class RemoteFetch:
    """Leading n_blocks blocks of the prompt held by holder."""

    holder: str
    n_blocks: int
    medium: Medium


@dataclass
class PrefillPlan:
    local: MatchResult
    remote: List[RemoteFetch] = field(default_factory=list)

    @property
    def remote_locations(self) -> List[CachedLocation]:
        locations = []
        covered = self.local.n_blocks
        for f in self.remote:
            locations.append(CachedLocation(f.holder, f.medium, f.n_blocks - covered, remote=True))
            covered = f.n_blocks
        return locations

    @property
    def has_cache(self) -> bool:
        return self.local.n_blocks > 0 or bool(self.remote)


class InferenceInstance:
    """
    Parameters
    ----------
    spec: InstanceSpec
    mempool: MemPool
    host:
        The simulator. Used attributes: ``now``, ``config``, ``transfers``,
        ``pools``, ``instances``, ``cluster``, ``schedule``, ``fail_request``,
        ``response_done``.
    """

    def __init__(self, spec: InstanceSpec, mempool: MemPool, host):
        self.spec = spec
        self.instance_id = spec.instance_id
        self.kind = spec.kind
        self.mempool = mempool
        self.host = host
        config = host.config
        self.design: CachingDesign = config.design
        self.block_cfg = config.block
        self.model_cfg = config.model
        self.timing = config.timing
        self.batching = config.batching
        self.transfer_mode: TransferMode = config.transfer_mode
        self.cost_model = CostModel(self.timing, self.block_cfg.block_size, self._remote_move_time)

        self.prefill_queue: deque = deque()
        self.decoding: List[RequestState] = []
        self.waiting_transfer: deque = deque()
        self.holders = set()
        self._load: Dict[int, int] = {}
        self.busy = False
        self.crashed = False
        self._tick_pending = False

    def __repr__(self):
        return f"InferenceInstance({self.instance_id}, {self.kind.value})"

    @property
    def caching(self) -> bool:
        if not self.spec.caching_enabled:
            return False
        if self.kind == InstanceKind.PrefillOnly:
            return self.design.at_least(CachingDesign.PDCaching1)
        if self.kind == InstanceKind.DecodeOnly:
            return self.design.at_least(CachingDesign.PDCaching2)
        return True

    @property
    def load(self) -> int:
        return sum(self._load.values())

    @property
    def bulk_mode(self) -> TransferMode:
        return bulk_mode(self.block_cfg.layout)

    def add_load(self, state: RequestState):
        self._load[state.request_id] = state.load_tokens

    def drop_load(self, state: RequestState):
        self._load.pop(state.request_id, None)

    def _remote_move_time(self, holder: str, n_blocks: int, medium: Medium) -> float:
        return self.host.transfers.estimate_time(
            n_blocks, holder, self.instance_id, self.bulk_mode, medium
        )

    def _schedule_tick(self):
        if not self._tick_pending:
            self._tick_pending = True
            self.host.schedule(
                self.host.now + self.batching.schedule_tick, "ScheduleTick", self.instance_id
            )

    # Event entry points

    def enqueue(self, state: RequestState):
        self.prefill_queue.append(state)
        self.add_load(state)
        self.try_schedule()

    def start_decoding(self, state: RequestState):
        state.advance(Phase.Decoding)
        self.holders.add(state.request_id)
        self.decoding.append(state)
        self.try_schedule()

    def on_tick(self):
        self._tick_pending = False
        if self.crashed:
            return
        waiting = list(self.waiting_transfer)
        self.waiting_transfer.clear()
        for state in waiting:
            if not state.terminal:
                self._send_to_decode(state)
        self.try_schedule()

    def try_schedule(self):
        if self.crashed or self.busy:
            return
        if self.prefill_queue and self.run_prefill():
            return
        if self.decoding:
            self.run_decode()

    def forget(self, state: RequestState):
        """Drop state from every queue of this instance."""
        for queue in (self.prefill_queue, self.waiting_transfer):
            if state in queue:
                queue.remove(state)
        if state in self.decoding:
            self.decoding.remove(state)

    # Prefill

    def _plan_prefill(self, state: RequestState) -> PrefillPlan:
        """Match the prompt locally and against the routing's extra holders. The
        local match is pinned until the plan is executed or dropped."""
        request = state.request
        B = self.block_cfg.block_size
        cap = max(0, (request.prompt_len - 1) // B)
        if not self.caching or cap == 0:
            return PrefillPlan(MatchResult(0, []))
        m = self.mempool.match(request.prompt)
        n = min(m.n_blocks, cap)
        local = MatchResult(n * B, m.addrs[:n], m.node if n else None)
        self.mempool.lock(local.node)
        plan = PrefillPlan(local)

        holders = getattr(state.routing, "extra_holders", None) or []
        covered = n
        for holder, lo, hi in sorted(holders, key=lambda h: h[1]):
            if holder == self.instance_id or not self.host.cluster.is_reachable(holder):
                continue
            end = min(hi // B, cap)
            if end <= covered:
                continue
            hm = self.host.pools[holder].match(request.prompt[: end * B])
            k = min(hm.n_blocks, end)
            if k <= covered:
                continue
            medium = (
                Medium.DRAM if any(a.medium == Medium.DRAM for a in hm.addrs[covered:k]) else Medium.HBM
            )
            plan.remote.append(RemoteFetch(holder, k, medium))
            covered = k
        return plan

    def _current_addrs(self, local: MatchResult, prompt) -> List[BlockAddr]:
        """Addresses of the pinned local match now. Earlier members of the same
        batch may have swapped shared blocks into HBM since the plan was made."""
        if not local.n_blocks:
            return []
        return list(self.mempool.match(prompt).addrs[: local.n_blocks])

    def _unpin(self, state: RequestState):
        for node in state.pins.pop(self.instance_id, []):
            self.mempool.unlock(node)

    def _acquire(self, state: RequestState, plan: PrefillPlan, decision: ReuseDecision, now: float):
        """
        Bring reused blocks into HBM and allocate the rest.

        Returns (fetch finish time, DRAM fetch overhead).

        Raises
        ------
        OutOfMemory; every pin taken for the request is released first.
        """
        request = state.request
        B = self.block_cfg.block_size
        pins = state.pins.setdefault(self.instance_id, [])
        if plan.local.node is not None:
            pins.append(plan.local.node)
        reused: List[BlockAddr] = []
        fetch_end = now
        overhead = 0.0
        try:
            if decision == ReuseDecision.Reuse:
                reused = self._current_addrs(plan.local, request.prompt)
                dram = [i for i, a in enumerate(reused) if a.medium == Medium.DRAM]
                if dram:
                    moved = self.mempool.swap_in([reused[i] for i in dram])
                    for i, a in zip(dram, moved):
                        reused[i] = a
                    overhead = self.timing.dram_fetch_overhead
                for fetch in plan.remote:
                    held = self.host.pools[fetch.holder].match(request.prompt[: fetch.n_blocks * B])
                    if held.n_blocks < fetch.n_blocks:
                        break
                    try:
                        handle = self.host.transfers.transfer_with_insert(
                            fetch.holder,
                            self.instance_id,
                            request.prompt[: fetch.n_blocks * B],
                            held.addrs,
                            flags=TransferFlags(pin_at_receiver=True),
                            now=fetch_end,
                            mode=self.bulk_mode,
                            request_id=request.request_id,
                            kind="fetch",
                        )
                        self.host.transfers.complete(handle, handle.end_time)
                    except (DstOutOfMemory, DstUnreachable) as e:
                        logger.debug(f"{self.instance_id}: remote fetch from {fetch.holder} failed: {e}")
                        break
                    fetch_end = handle.end_time
                    reused = list(handle.dst_addrs[: fetch.n_blocks])
                    if handle.dst_node is not None:
                        pins.append(handle.dst_node)
            else:
                self._unpin(state)
                pins = state.pins.setdefault(self.instance_id, [])

            n_total = tokens_to_blocks(request.prompt_len, self.block_cfg)
            new = self.mempool.alloc_mem(
                n_total - len(reused), AllocType.HBM, owner=request.request_id
            )
        except OutOfMemory:
            self._unpin(state)
            raise

        state.matched_prefix = plan.local
        state.blocks[self.instance_id] = reused + new
        state.matched_tokens = plan.local.matched_tokens
        state.tokens_reused = len(reused) * B
        state.prefill_tokens_computed = request.prompt_len - state.tokens_reused
        state.decision = decision.value if plan.has_cache else "None"
        self.holders.add(request.request_id)
        state.advance(Phase.Prefilling)
        return fetch_end, overhead

    def run_prefill(self) -> bool:
        """
        Start a prefill batch from the head of the queue.

        Returns False if nothing could be admitted for lack of memory; the queue is
        then retried at the next scheduling tick.
        """
        now = self.host.now
        while self.prefill_queue:
            head = self.prefill_queue[0]
            need = tokens_to_blocks(head.request.prompt_len, self.block_cfg)
            if need <= self.mempool.pools[Medium.HBM].capacity:
                break
            self.host.fail_request(head, "CapacityAbort")
        candidates = admit_batch(
            self.prefill_queue, self.batching.max_batch_tokens, self.batching.max_batch_size
        )
        if not candidates:
            return False

        plans = [self._plan_prefill(s) for s in candidates]
        requests = [s.request for s in candidates]
        if not self.caching:
            decisions = [ReuseDecision.Recompute] * len(candidates)
        elif self.batching.cost_model:
            decisions = self.cost_model.should_reuse_cache(
                requests,
                [p.local for p in plans],
                [p.remote_locations for p in plans],
                self.instance_id,
            )
        else:
            decisions = [
                ReuseDecision.Reuse if p.has_cache else ReuseDecision.Recompute for p in plans
            ]

        admitted = []
        fetch_end, overhead = now, 0.0
        for i, (state, plan, decision) in enumerate(zip(candidates, plans, decisions)):
            try:
                end, extra = self._acquire(state, plan, decision, fetch_end)
            except OutOfMemory:
                for rest in plans[i + 1 :]:
                    self.mempool.unlock(rest.local.node)
                break
            fetch_end, overhead = end, overhead + extra
            admitted.append(state)

        if not admitted:
            if not self.holders:
                self.host.fail_request(candidates[0], "CapacityAbort")
                return self.run_prefill()
            self._schedule_tick()
            return False
        for _ in admitted:
            self.prefill_queue.popleft()

        batch_tokens = sum(s.request.prompt_len for s in admitted)
        compute = sum(
            self.timing.prefill_cost(s.prefill_tokens_computed, batch_tokens) for s in admitted
        )
        start = fetch_end + overhead + self.mempool.drain_swap_time()
        done = start + compute
        self.busy = True
        self.host.schedule(done, "PrefillDone", (self.instance_id, admitted))
        logger.debug(
            f"{self.instance_id}: prefill of {len(admitted)} request(s), "
            f"{sum(s.prefill_tokens_computed for s in admitted)} new tokens, done at {done:.6f}"
        )
        if self.kind == InstanceKind.PrefillOnly and self.transfer_mode == TransferMode.ByLayer:
            for state in admitted:
                if state.request.gen_len > 1:
                    self._start_by_layer(state, start, compute)
        return True

    def _start_by_layer(self, state: RequestState, compute_start: float, compute: float):
        """Allocate at the decode instance now and send every layer as soon as it is
        computed. Falls back to a bulk transfer at prefill completion when the decode
        instance has no room."""
        now = self.host.now
        request = state.request
        L = self.model_cfg.num_layers
        layer_times = [compute_start + (l + 1) * compute / L for l in range(L)]
        blocks = state.blocks[self.instance_id]
        incremental = self.design.at_least(CachingDesign.PDCaching2)
        transfers = self.host.transfers
        try:
            receiver = transfers.allocate_at_receiver(
                self.instance_id,
                state.decode_instance,
                len(blocks),
                tokens=request.prompt if incremental else None,
                owner=request.request_id,
            )
        except (DstOutOfMemory, DstUnreachable):
            return
        kwargs = dict(
            now=now,
            mode=TransferMode.ByLayer,
            layer_finish_times=layer_times,
            request_id=request.request_id,
            kind="p2d",
            not_before=now + transfers.network.control_rtt,
            private=transfer_metadata(request),
        )
        if incremental:
            handle = transfers.transfer_with_insert(
                self.instance_id, state.decode_instance, request.prompt, blocks,
                dst_addrs=receiver, flags=TransferFlags(pin_at_receiver=True), **kwargs,
            )
        else:
            handle = transfers.transfer(
                self.instance_id, state.decode_instance, blocks, dst_addrs=receiver, **kwargs
            )
        self._register_transfer(state, handle)

    def _register_transfer(self, state: RequestState, handle):
        state.transfer = handle
        if handle.kind == "p2d":
            state.bytes_transferred += handle.bytes
        self.host.instances[handle.dst].holders.add(state.request_id)
        self.host.schedule(handle.end_time, "TransferChunkDone", handle)

    def on_prefill_done(self, batch: List[RequestState]):
        self.busy = False
        for state in batch:
            if not state.terminal:
                self._finish_prefill(state)
        self.try_schedule()

    def _finish_prefill(self, state: RequestState):
        now = self.host.now
        request = state.request
        blocks = state.blocks[self.instance_id]
        self.mempool.set_tags(blocks, block_tags(request.prompt, self.block_cfg.block_size))
        if self.caching:
            result = self.mempool.insert(request.prompt, blocks)
            state.blocks[self.instance_id] = result.addrs + blocks[len(result.addrs) :]
            if result.addrs:
                self.mempool.lock(result.node)
            self._unpin(state)
            if result.addrs:
                state.pins[self.instance_id] = [result.node]

        state.prefill_done_time = now
        state.first_token_time = now
        state.generated = 1
        if request.gen_len == 1:
            self.finish(state)
        elif self.kind == InstanceKind.PDColocated:
            state.advance(Phase.Decoding)
            self.decoding.append(state)
        else:
            state.advance(Phase.Transferring)
            if state.transfer is not None:
                state.transfer.src_addrs = list(state.blocks[self.instance_id])
            else:
                self._send_to_decode(state)

    def _send_to_decode(self, state: RequestState):
        now = self.host.now
        request = state.request
        dst = state.decode_instance
        blocks = state.blocks[self.instance_id]
        mode = self.bulk_mode if self.transfer_mode == TransferMode.ByLayer else self.transfer_mode
        kwargs = dict(
            now=now,
            mode=mode,
            request_id=request.request_id,
            kind="p2d",
            private=transfer_metadata(request),
        )
        try:
            if self.design.at_least(CachingDesign.PDCaching2):
                handle = self.host.transfers.transfer_with_insert(
                    self.instance_id, dst, request.prompt, blocks,
                    flags=TransferFlags(pin_at_receiver=True), **kwargs,
                )
            else:
                handle = self.host.transfers.transfer(self.instance_id, dst, blocks, **kwargs)
        except DstOutOfMemory:
            receiver = self.host.instances[dst]
            if not receiver.holders:
                self.host.fail_request(state, "CapacityAbort")
                return
            self.waiting_transfer.append(state)
            self._schedule_tick()
            return
        except DstUnreachable:
            self.host.fail_request(state, "DstUnreachable")
            return
        self._register_transfer(state, handle)

    # Decode

    def run_decode(self):
        now = self.host.now
        batch = []
        for state in list(self.decoding[: self.batching.max_decode_batch]):
            blocks = state.blocks[self.instance_id]
            need = tokens_to_blocks(state.request.prompt_len + state.generated, self.block_cfg)
            try:
                blocks.extend(
                    self.mempool.alloc_mem(
                        need - len(blocks), AllocType.HBM, owner=state.request_id
                    )
                )
            except OutOfMemory:
                self.host.fail_request(state, "CapacityAbort")
                continue
            batch.append(state)
        if not batch:
            return
        duration = self.timing.decode_step_cost(len(batch)) + self.mempool.drain_swap_time()
        self.busy = True
        self.host.schedule(now + duration, "DecodeStep", (self.instance_id, batch))

    def on_decode_step(self, batch: List[RequestState]):
        now = self.host.now
        self.busy = False
        for state in batch:
            if state.terminal:
                continue
            state.generated += 1
            if state.generated == 2:
                state.second_token_time = now
            if state.generated >= state.request.gen_len:
                self.decoding.remove(state)
                self.finish(state)
        self.try_schedule()

    # Completion

    def finish(self, state: RequestState):
        state.finish_time = self.host.now
        state.advance(Phase.Done)
        self.retire_request(state)

    def retire_request(self, state: RequestState):
        """
        Turn the request's active KV cache into historical cache as the caching
        design allows, release the rest, and return the response.

        Under PDCaching3 the decode instance first sends the decode-produced KV back
        to the prefill instance; the response is returned when that transfer is
        acknowledged.
        """
        request = state.request
        B = self.block_cfg.block_size
        if self.kind != InstanceKind.PrefillOnly and self.caching:
            tokens = state.context_tokens()[: request.prompt_len + state.generated - 1]
            blocks = state.blocks[self.instance_id]
            n = tokens_to_blocks(len(tokens), self.block_cfg)
            self.mempool.set_tags(blocks[:n], block_tags(tokens, B))
            result = self.mempool.insert(tokens, blocks[:n])
            state.blocks[self.instance_id] = result.addrs + blocks[len(result.addrs) :]
            if result.addrs:
                self.mempool.lock(result.node)
                state.pins.setdefault(self.instance_id, []).append(result.node)
            state.cached_tokens = tokens

            full = len(result.addrs)
            if (
                self.kind == InstanceKind.DecodeOnly
                and self.design == CachingDesign.PDCaching3
                and full > 0
            ):
                try:
                    handle = self.host.transfers.transfer_with_insert(
                        self.instance_id,
                        state.prefill_instance,
                        tokens[: full * B],
                        state.blocks[self.instance_id][:full],
                        now=self.host.now,
                        mode=self.bulk_mode,
                        request_id=request.request_id,
                        kind="d2p",
                        private=transfer_metadata(request),
                    )
                except (DstOutOfMemory, DstUnreachable) as e:
                    logger.debug(f"request {request.request_id}: no return transfer ({e})")
                else:
                    self._register_transfer(state, handle)
                    return
        self.release(state)
        self.host.response_done(state)

    def release(self, state: RequestState):
        """Unpin the request's index paths here and free the blocks it still owns."""
        if not self.crashed:
            self._unpin(state)
            blocks = state.blocks.pop(self.instance_id, [])
            self.mempool.free_owned(blocks, state.request_id)
        else:
            state.pins.pop(self.instance_id, None)
            state.blocks.pop(self.instance_id, None)
        self.holders.discard(state.request_id)
        self.drop_load(state)
