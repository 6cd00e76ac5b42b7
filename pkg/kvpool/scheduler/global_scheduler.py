from dataclasses import dataclass
from typing import List, Optional

from kvpool.core.exceptions import ConfigError, NoLiveInstance
from kvpool.core.types import CachingDesign, InstanceKind, Request, as_number, parse_enum
from kvpool.core.utils.logging_utils import logger
from kvpool.scheduler.policies import (
    ClusterSnapshot,
    Policy,
    RoutingDecision,
    least_load,
    longest_prefix,
    session_hash,
)
from kvpool.scheduler.prompt_trees import GlobalPromptTrees

ROUTING_COLUMNS = [
    "request_id",
    "policy",
    "chosen_instance",
    "decode_instance",
    "matched_len",
    "decode_matched_len",
    "extra_holders",
    "alternatives",
]


@dataclass
class RoutingRecord:
    request_id: int
    policy: str
    chosen_instance: str
    decode_instance: str
    matched_len: int
    decode_matched_len: int
    extra_holders: str
    alternatives: str


class GlobalScheduler:
    """
    Routes requests to a colocated instance or to a prefill/decode pair.

    Parameters
    ----------
    policy: Policy
    trees: GlobalPromptTrees
    design: CachingDesign
        Decode-side prefix locality only matters from PDCaching2 on.
    balance_abs_threshold: int, optional
        With the prompt-tree policy, fall back to the least loaded instance when
        the best-matching one carries more than this many extra tokens of load. The
        best holder is then reported as an extra holder.
    """

    def __init__(
        self,
        policy: Policy,
        trees: GlobalPromptTrees,
        design: CachingDesign = CachingDesign.PDBasic,
        balance_abs_threshold: Optional[int] = None,
    ):
        self.policy = parse_enum(Policy, policy, "scheduler.policy")
        self.trees = trees
        self.design = design
        self.balance_abs_threshold = balance_abs_threshold
        self.records: List[RoutingRecord] = []

    def route(self, request: Request, cluster_state: ClusterSnapshot) -> RoutingDecision:
        colocated = cluster_state.of_kind(InstanceKind.PDColocated)
        if colocated:
            decision = self._route_primary(request, cluster_state, InstanceKind.PDColocated)
        else:
            decision = self._route_primary(request, cluster_state, InstanceKind.PrefillOnly)
            decision.decode_instance = self._route_decode(request, cluster_state, decision)
        self.records.append(
            RoutingRecord(
                request_id=request.request_id,
                policy=self.policy.value,
                chosen_instance=decision.prefill_instance,
                decode_instance=decision.decode_instance or "",
                matched_len=decision.matched_len.get("primary", 0),
                decode_matched_len=decision.matched_len.get("decode", 0),
                extra_holders=";".join(f"{i}[{lo}:{hi}]" for i, lo, hi in decision.extra_holders),
                alternatives=";".join(decision.alternatives),
            )
        )
        logger.debug(
            f"request {request.request_id} -> {decision.prefill_instance}"
            + (f"/{decision.decode_instance}" if decision.decode_instance else "")
        )
        return decision

    def _route_primary(self, request, cluster_state, kind) -> RoutingDecision:
        candidates = cluster_state.of_kind(kind)
        if not candidates:
            raise NoLiveInstance(f"no live {kind.value} instance for request {request.request_id}")
        loads = cluster_state.loads
        matches = self.trees.match_global(request.prompt, kind, candidates)
        extra = []
        if self.policy == Policy.LeastLoad:
            chosen = least_load(candidates, loads)
        elif self.policy == Policy.SessionId:
            chosen = session_hash(request.session_id, candidates)
        else:
            chosen = longest_prefix(candidates, matches, loads)
            if matches[chosen] == 0:
                chosen = least_load(candidates, loads)
            elif self.balance_abs_threshold is not None:
                lightest = least_load(candidates, loads)
                if loads.get(chosen, 0) - loads.get(lightest, 0) > self.balance_abs_threshold:
                    if matches[chosen] > matches[lightest]:
                        extra.append((chosen, matches[lightest], matches[chosen]))
                    chosen = lightest
        return RoutingDecision(
            prefill_instance=chosen,
            matched_len={"primary": matches[chosen]},
            extra_holders=extra,
            alternatives=candidates,
        )

    def _route_decode(self, request, cluster_state, decision) -> str:
        candidates = cluster_state.of_kind(InstanceKind.DecodeOnly)
        if not candidates:
            raise NoLiveInstance(f"no live DecodeOnly instance for request {request.request_id}")
        loads = cluster_state.loads
        if self.policy == Policy.SessionId:
            return session_hash(request.session_id, candidates)
        if self.policy == Policy.PromptTree and self.design.at_least(CachingDesign.PDCaching2):
            matches = self.trees.match_global(request.prompt, InstanceKind.DecodeOnly, candidates)
            chosen = longest_prefix(candidates, matches, loads)
            if matches[chosen] > 0:
                decision.matched_len["decode"] = matches[chosen]
                return chosen
        return least_load(candidates, loads)


def build_global_scheduler(settings: dict, trees: GlobalPromptTrees, design: CachingDesign):
    section = settings["scheduler"]
    return GlobalScheduler(
        parse_enum(Policy, section["policy"], "scheduler.policy"),
        trees,
        design,
        as_number(
            section.get("balance_abs_threshold"),
            "scheduler.balance_abs_threshold",
            integer=True,
            allow_none=True,
        ),
    )


def build_prompt_trees(settings: dict, block_size: int, clock=None) -> GlobalPromptTrees:
    ttl = as_number(settings["scheduler"]["ttl"], "scheduler.ttl")
    if ttl <= 0:
        raise ConfigError(f"must be positive, got {ttl}", path="scheduler.ttl")
    return GlobalPromptTrees(block_size, ttl, clock)
