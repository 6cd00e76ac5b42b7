from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

from kvpool.core.types import BlockAddr, Request, TokenList
from kvpool.mempool import MatchResult, RadixNode


class Phase(str, Enum):
    Queued = "Queued"
    Prefilling = "Prefilling"
    Transferring = "Transferring"
    Decoding = "Decoding"
    Done = "Done"
    Failed = "Failed"


_ORDER = [Phase.Queued, Phase.Prefilling, Phase.Transferring, Phase.Decoding, Phase.Done]


@dataclass
class RequestState:
    """
    Engine-side state of one in-flight request.

    Blocks and index pins are kept per instance, because a disaggregated request
    holds KV cache on its prefill instance and on its decode instance at the same
    time while it is being transferred.
    """

    request: Request
    prefill_instance: str
    decode_instance: Optional[str] = None
    routing: object = None
    phase: Phase = Phase.Queued
    blocks: Dict[str, List[BlockAddr]] = field(default_factory=dict)
    pins: Dict[str, List[RadixNode]] = field(default_factory=dict)
    matched_prefix: Optional[MatchResult] = None
    generated: int = 0
    decision: str = "None"
    matched_tokens: int = 0
    tokens_reused: int = 0
    prefill_tokens_computed: int = 0
    bytes_transferred: float = 0.0
    cached_tokens: Optional[TokenList] = None
    returned_to_prefill: bool = False
    transfer: object = None
    prefill_done_time: Optional[float] = None
    first_token_time: Optional[float] = None
    second_token_time: Optional[float] = None
    finish_time: Optional[float] = None
    response_time: Optional[float] = None
    status: str = "ok"

    @property
    def request_id(self) -> int:
        return self.request.request_id

    @property
    def kv_blocks(self) -> List[BlockAddr]:
        """Active KV of the instance currently working on the request."""
        return self.blocks.get(self.active_instance, [])

    @property
    def active_instance(self) -> str:
        if self.decode_instance is not None and self.phase in (Phase.Decoding, Phase.Done):
            return self.decode_instance
        return self.prefill_instance

    @property
    def terminal(self) -> bool:
        return self.phase in (Phase.Done, Phase.Failed)

    @property
    def load_tokens(self) -> int:
        return self.request.prompt_len + self.request.gen_len

    def output_tokens(self) -> TokenList:
        """Token IDs produced so far. Requests without response tokens emit zeros."""
        response = tuple(self.request.response_tokens[: self.generated])
        return response + (0,) * (self.generated - len(response))

    def context_tokens(self) -> TokenList:
        return tuple(self.request.prompt) + self.output_tokens()

    def advance(self, phase: Phase):
        """Move to phase. Transitions are forward-only; Failed is reachable from any
        non-terminal phase."""
        if self.terminal:
            raise ValueError(f"request {self.request_id} is already {self.phase.value}")
        if phase != Phase.Failed and _ORDER.index(phase) < _ORDER.index(self.phase):
            raise ValueError(
                f"request {self.request_id} can not go from {self.phase.value} to {phase.value}"
            )
        self.phase = phase
