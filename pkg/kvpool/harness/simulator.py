"""
Deterministic discrete-event simulation of a serving cluster.

The simulator owns the clock and the event queue and wires the memory pools,
transfer engine, instances, global scheduler and cluster manager together. All
state changes happen inside event handlers, in (time, seq) order, so a run is a
pure function of its settings.
"""

from dataclasses import asdict
from typing import Dict, List, Optional, Set, Tuple

import numpy as np
import pandas as pd

from kvpool.cluster import build_cluster_manager
from kvpool.core.exceptions import DeadlockDetected, DstUnreachable, NoLiveInstance
from kvpool.core.types import CachingDesign, InstanceKind, Request
from kvpool.core.utils.logging_utils import logger
from kvpool.engine import InferenceInstance, Phase, RequestState
from kvpool.harness.config import SimulationConfig, build_simulation_config
from kvpool.harness.events import EventKind, EventQueue
from kvpool.harness.metrics import RequestRecord, compute_metrics, requests_frame
from kvpool.harness.result import SimulationResult
from kvpool.harness.workload import Session, Workload, generate_workload
from kvpool.mempool import MemPool
from kvpool.scheduler import (
    ROUTING_COLUMNS,
    ClusterSnapshot,
    build_global_scheduler,
    build_prompt_trees,
)
from kvpool.transfer import TRANSFER_RECORD_COLUMNS, TransferEngine


class Simulator:
    """
    Parameters
    ----------
    config: SimulationConfig
    workload: Workload, optional
        Replaces the workload described by config.workload.
    """

    def __init__(self, config: SimulationConfig, workload: Optional[Workload] = None):
        self.config = config
        self.now = 0.0
        self.events = EventQueue()
        self.cluster = build_cluster_manager(config.settings)
        self.pools: Dict[str, MemPool] = {}
        for spec in config.instances:
            self.cluster.register_instance(spec)
            self.pools[spec.instance_id] = MemPool(
                spec.instance_id,
                config.block,
                spec.hbm_capacity_blocks,
                spec.dram_capacity_blocks,
                config.mempool,
                clock=self.clock,
                swap_cost_per_block=config.timing.swap_cost_per_block,
            )
        self.transfers = TransferEngine(
            config.network,
            config.model,
            config.block,
            self.pools,
            {s.instance_id: s.parallelism for s in config.instances},
            is_reachable=self.cluster.is_reachable,
        )
        self.trees = build_prompt_trees(config.settings, config.block.block_size, self.clock)
        self.scheduler = build_global_scheduler(config.settings, self.trees, config.design)
        self.instances: Dict[str, InferenceInstance] = {
            s.instance_id: InferenceInstance(s, self.pools[s.instance_id], self)
            for s in config.instances
        }
        if workload is None:
            workload = generate_workload(
                config.workload, config.model, len(config.instances), config.seed
            )
        self.workload = workload
        self.states: Dict[int, RequestState] = {}
        self.records: List[RequestRecord] = []
        self._turns: Dict[int, Tuple[Session, int]] = {}
        self._responded: Set[int] = set()
        self._think_rng = np.random.default_rng([config.seed, 1])
        self._heartbeat_scheduled = False
        self.num_events = 0

    def clock(self) -> float:
        return self.now

    def schedule(self, time: float, kind, payload=None):
        if time < self.now:
            raise ValueError(f"can not schedule {kind} at {time} before now ({self.now})")
        self.events.push(time, kind, payload)

    def snapshot(self) -> ClusterSnapshot:
        return ClusterSnapshot(
            live={k.value: self.cluster.live_instances(k) for k in InstanceKind},
            loads={i: inst.load for i, inst in sorted(self.instances.items())},
        )

    # Running

    def _seed_events(self):
        for session in self.workload.sessions:
            for k, request in enumerate(session.turns):
                self._turns[request.request_id] = (session, k)
            first = session.turns[0]
            self.schedule(first.arrival_time, EventKind.Arrival, first)
        for failure in self.config.failures:
            self.schedule(failure.time, EventKind.FailureInject, failure.instance_id)
        for change in self.config.membership:
            self.schedule(change.time, EventKind.Membership, change)
        if self.config.failures:
            self._schedule_heartbeat()

    def _schedule_heartbeat(self):
        if not self._heartbeat_scheduled:
            self._heartbeat_scheduled = True
            self.schedule(self.now + self.cluster.heartbeat_interval, EventKind.Heartbeat)

    def run(self) -> SimulationResult:
        """
        Process events until none are left.

        Raises
        ------
        DeadlockDetected if requests are still unaccounted for when the queue runs
        empty.
        """
        self._seed_events()
        handlers = {
            EventKind.Arrival: self._on_arrival,
            EventKind.PrefillDone: self._on_prefill_done,
            EventKind.TransferChunkDone: self._on_transfer_done,
            EventKind.DecodeStep: self._on_decode_step,
            EventKind.ResponseDone: self._on_response_done,
            EventKind.Heartbeat: self._on_heartbeat,
            EventKind.FailureInject: self._on_failure_inject,
            EventKind.ScheduleTick: self._on_tick,
            EventKind.Membership: self._on_membership,
        }
        while self.events:
            event = self.events.pop()
            self.now = event.time
            self.num_events += 1
            handlers[event.kind](event.payload)

        expected = self.workload.num_requests
        if len(self.records) != expected:
            pending = sorted(
                set(r.request_id for r in self.workload.requests())
                - set(r.request_id for r in self.records)
            )
            raise DeadlockDetected(
                f"event queue empty at t={self.now:.6f} with {len(pending)} request(s) "
                f"unaccounted for, e.g. {pending[:5]}"
            )
        logger.info(
            f"simulation finished at t={self.now:.6f} after {self.num_events} events, "
            f"{expected} requests"
        )
        return self.result()

    # Request lifecycle

    def _on_arrival(self, request: Request):
        request.arrival_time = self.now
        try:
            decision = self.scheduler.route(request, self.snapshot())
        except NoLiveInstance as e:
            logger.warning(str(e))
            state = RequestState(request, prefill_instance="")
            self.states[request.request_id] = state
            self.fail_request(state, "NoLiveInstance")
            return
        state = RequestState(
            request,
            prefill_instance=decision.prefill_instance,
            decode_instance=decision.decode_instance,
            routing=decision,
        )
        self.states[request.request_id] = state
        if state.decode_instance is not None:
            self.instances[state.decode_instance].add_load(state)
        self.instances[state.prefill_instance].enqueue(state)

    def _on_prefill_done(self, payload):
        instance_id, batch = payload
        instance = self.instances[instance_id]
        if not instance.crashed:
            instance.on_prefill_done(batch)

    def _on_decode_step(self, payload):
        instance_id, batch = payload
        instance = self.instances[instance_id]
        if not instance.crashed:
            instance.on_decode_step(batch)

    def _on_tick(self, instance_id: str):
        self.instances[instance_id].on_tick()

    def _on_transfer_done(self, handle):
        # the receiver identifies the request from the metadata sent with the KV
        state = self.states[handle.private["request_id"]]
        src, dst = self.instances[handle.src], self.instances[handle.dst]
        if handle.kind == "d2p":
            try:
                state.returned_to_prefill = self.transfers.complete(handle, self.now)
            except DstUnreachable:
                pass
            dst.holders.discard(state.request_id)
            src.release(state)
            self.response_done(state)
            return
        if state.terminal:
            return
        try:
            completed = self.transfers.complete(handle, self.now)
        except DstUnreachable:
            self.fail_request(state, "DstUnreachable")
            return
        if not completed:
            return
        state.transfer = None
        state.blocks[dst.instance_id] = list(handle.dst_addrs)
        state.pins[dst.instance_id] = [handle.dst_node] if handle.dst_node is not None else []
        src.release(state)
        dst.start_decoding(state)

    def response_done(self, state: RequestState):
        if state.request_id not in self._responded:
            self._responded.add(state.request_id)
            self.schedule(self.now, EventKind.ResponseDone, state)

    def fail_request(self, state: RequestState, status: str):
        """Fail a request: drop it from every queue, abort its transfer and release
        whatever it holds on reachable instances."""
        if state.terminal:
            return
        state.advance(Phase.Failed)
        state.status = status
        involved = [i for i in (state.prefill_instance, state.decode_instance) if i in self.instances]
        for instance_id in involved:
            self.instances[instance_id].forget(state)
        if state.transfer is not None:
            self.transfers.abort(state.transfer, self.now)
            state.transfer = None
        for instance_id in sorted(set(state.blocks) | set(state.pins)):
            self.instances[instance_id].release(state)
        for instance_id in involved:
            self.instances[instance_id].holders.discard(state.request_id)
            self.instances[instance_id].drop_load(state)
        logger.debug(f"request {state.request_id} failed: {status}")
        self.response_done(state)

    def _update_trees(self, state: RequestState):
        design = self.config.design
        request = state.request
        p = state.prefill_instance
        cached = state.cached_tokens if state.cached_tokens is not None else request.prompt
        instance = self.instances[p]
        if not self.cluster.is_reachable(p):
            return
        if instance.kind == InstanceKind.PDColocated:
            if instance.caching:
                self.trees.update_trees(p, InstanceKind.PDColocated, cached)
            return
        if instance.caching:
            self.trees.update_trees(p, InstanceKind.PrefillOnly, request.prompt)
            if state.returned_to_prefill:
                self.trees.update_trees(p, InstanceKind.PrefillOnly, cached)
        d = state.decode_instance
        if (
            d is not None
            and design.at_least(CachingDesign.PDCaching2)
            and state.cached_tokens is not None
            and self.cluster.is_reachable(d)
        ):
            self.trees.update_trees(d, InstanceKind.DecodeOnly, state.cached_tokens)

    def _on_response_done(self, state: RequestState):
        request = state.request
        state.response_time = self.now
        if state.status == "ok":
            self._update_trees(state)
        for instance_id in (state.prefill_instance, state.decode_instance):
            if instance_id in self.instances:
                self.instances[instance_id].drop_load(state)
        self.records.append(self._record(state))

        session, k = self._turns[request.request_id]
        if k + 1 < len(session.turns):
            following = session.turns[k + 1]
            think = self.workload.think_time_mean
            delay = float(self._think_rng.exponential(think)) if think > 0 else 0.0
            following.arrival_time = self.now + delay
            self.schedule(following.arrival_time, EventKind.Arrival, following)

    def _record(self, state: RequestState) -> RequestRecord:
        request = state.request
        arrival = request.arrival_time

        def since_arrival(t):
            return None if t is None else t - arrival

        ok = state.status == "ok"
        ttft = since_arrival(state.first_token_time)
        ttst = since_arrival(state.second_token_time)
        jct = since_arrival(state.finish_time) if ok else None
        tpot = None
        if ok and request.gen_len > 1:
            tpot = (jct - ttft) / (request.gen_len - 1)
        return RequestRecord(
            request_id=request.request_id,
            session_id=request.session_id,
            turn=request.turn_index,
            arrival=arrival,
            ttft=ttft,
            ttst=ttst,
            jct=jct,
            tpot=tpot,
            prefill_tokens_computed=state.prefill_tokens_computed,
            tokens_reused=state.tokens_reused,
            matched_tokens=state.matched_tokens,
            bytes_transferred=state.bytes_transferred,
            decision=state.decision,
            status=state.status,
            prefill_instance=state.prefill_instance,
            decode_instance=state.decode_instance or "",
            prompt_len=request.prompt_len,
            gen_len=request.gen_len,
        )

    # Cluster events

    def _on_failure_inject(self, instance_id: str):
        self.cluster.crash(instance_id, self.now)
        self.instances[instance_id].crashed = True
        self._schedule_heartbeat()

    def _on_heartbeat(self, _payload=None):
        self._heartbeat_scheduled = False
        for instance_id in self.cluster.heartbeat(self.now):
            self.cluster.handle_failure(
                instance_id,
                self.now,
                self.pools,
                self.transfers,
                self.trees,
                self._fail_requests_of,
            )
        if self.events or self.cluster.undetected_failures:
            self._schedule_heartbeat()

    def _fail_requests_of(self, instance_id: str) -> List[int]:
        failed = []
        for request_id, state in sorted(self.states.items()):
            if state.terminal:
                continue
            on_prefill = state.prefill_instance == instance_id and (
                state.decode_instance is None
                or state.phase in (Phase.Queued, Phase.Prefilling, Phase.Transferring)
            )
            if on_prefill or state.decode_instance == instance_id:
                self.fail_request(state, "InstanceFailed")
                failed.append(request_id)
        return failed

    def _on_membership(self, change):
        self.cluster.remove_instance(change.instance_id)

    # Output

    def result(self) -> SimulationResult:
        requests = requests_frame(self.records)
        transfers = pd.DataFrame(
            [asdict(r) for r in self.transfers.records], columns=TRANSFER_RECORD_COLUMNS
        )
        transfers = transfers.sort_values("transfer_id", kind="stable").reset_index(drop=True)
        routing = pd.DataFrame(
            [asdict(r) for r in self.scheduler.records], columns=ROUTING_COLUMNS
        )
        report = compute_metrics(requests, transfers)
        result = SimulationResult(
            dictionary={
                "requests": requests,
                "transfers": transfers,
                "routing": routing,
                "summary": report.summary_frame(),
                "settings": self.config.settings,
            }
        )
        result.cleanup_reports = list(self.cluster.reports)
        return result


def run_simulation(settings=None, overrides=None, workload: Optional[Workload] = None) -> SimulationResult:
    """
    Run one simulation.

    Parameters
    ----------
    settings: str, dict or SimulationConfig
        Settings file, settings dict, or an already built configuration.
    overrides: list of str
        ``dotted.key=value`` overrides.
    workload: Workload, optional
        Explicit request stream instead of the configured one.

    Returns
    -------
    SimulationResult; its ``report`` property gives the MetricsReport.
    """
    if isinstance(settings, SimulationConfig):
        config = settings
    else:
        config = build_simulation_config(settings, overrides)
    return Simulator(config, workload).run()
