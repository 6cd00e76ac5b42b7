from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple

from kvpool.core.exceptions import ModeLayoutMismatch
from kvpool.core.types import BlockConfig, BlockLayout, ModelConfig, parse_enum, tokens_to_blocks


class TransferMode(str, Enum):
    ByLayer = "ByLayer"
    ByRequest = "ByRequest"
    ByRequestAgg = "ByRequestAgg"


def check_mode_layout(mode: TransferMode, layout: BlockLayout):
    """ByRequestAgg needs the aggregated layout and ByLayer the discrete one."""
    if mode == TransferMode.ByRequestAgg and layout != BlockLayout.Aggregated:
        raise ModeLayoutMismatch("ByRequestAgg requires the Aggregated block layout")
    if mode == TransferMode.ByLayer and layout != BlockLayout.Discrete:
        raise ModeLayoutMismatch("ByLayer requires the Discrete block layout")


def bulk_mode(layout: BlockLayout) -> TransferMode:
    """Mode for transfers that are not overlapped with prefill computation."""
    if layout == BlockLayout.Aggregated:
        return TransferMode.ByRequestAgg
    return TransferMode.ByRequest


@dataclass(frozen=True)
class ChunkGroup:
    """Consecutive network calls of equal size sharing an earliest start time.

    Each call covers the half-open layer range ``layers``.
    """

    earliest_start: float
    n_calls: int
    bytes_per_call: float
    layers: Tuple[int, int]
    kv_split: bool = False


@dataclass(frozen=True)
class Chunk:
    index: int
    block: int
    layer: Optional[int]
    kv: Optional[str]
    bytes: float
    earliest_start: float


@dataclass
class TransferPlan:
    mode: TransferMode
    n_blocks: int
    groups: List[ChunkGroup] = field(default_factory=list)

    @property
    def n_calls(self) -> int:
        return sum(g.n_calls for g in self.groups)

    @property
    def bytes_total(self) -> float:
        return sum(g.n_calls * g.bytes_per_call for g in self.groups)

    def iter_chunks(self) -> Iterator[Chunk]:
        """Individual calls in transmission order. Discrete calls are layer-major,
        then block, then K before V."""
        index = 0
        for g in self.groups:
            lo, _ = g.layers
            if g.kv_split:
                for b in range(g.n_calls // 2):
                    for kv in ("K", "V"):
                        yield Chunk(index, b, lo, kv, g.bytes_per_call, g.earliest_start)
                        index += 1
            else:
                for b in range(g.n_calls):
                    yield Chunk(index, b, None, None, g.bytes_per_call, g.earliest_start)
                    index += 1

    @property
    def chunks(self) -> List[Chunk]:
        return list(self.iter_chunks())


def plan_transfer(
    n_tokens: int,
    mode,
    block_cfg: BlockConfig,
    model_cfg: ModelConfig,
    layer_finish_times: Optional[Sequence[float]] = None,
    ready_time: float = 0.0,
) -> TransferPlan:
    """
    Plan the network calls that move the KV cache of n_tokens tokens.

    Parameters
    ----------
    n_tokens: int
        Tokens to move; a partial final block is moved as a whole block.
    mode: TransferMode
    block_cfg, model_cfg:
        Block size, layout and layer count.
    layer_finish_times: sequence of float
        Compute-finish time of every layer. Required for ByLayer, whose calls for
        layer l may not start before layer l is computed.
    ready_time: float
        Earliest start of ByRequest and ByRequestAgg calls (prefill completion).

    Returns
    -------
    TransferPlan
        With the discrete layout a block is 2 * L separate pieces, one call each;
        with the aggregated layout a block is one call.
    """
    mode = parse_enum(TransferMode, mode)
    check_mode_layout(mode, block_cfg.layout)
    L = model_cfg.num_layers
    n_blocks = tokens_to_blocks(n_tokens, block_cfg)
    block_bytes = model_cfg.kv_bytes(block_cfg.block_size)
    plan = TransferPlan(mode, n_blocks)
    if n_blocks == 0:
        return plan

    if mode == TransferMode.ByLayer:
        if layer_finish_times is None or len(layer_finish_times) != L:
            raise ValueError(f"ByLayer needs {L} layer finish times")
        for layer, t in enumerate(layer_finish_times):
            plan.groups.append(
                ChunkGroup(float(t), 2 * n_blocks, block_bytes / (2 * L), (layer, layer + 1), True)
            )
    elif block_cfg.layout == BlockLayout.Discrete:
        for layer in range(L):
            plan.groups.append(
                ChunkGroup(ready_time, 2 * n_blocks, block_bytes / (2 * L), (layer, layer + 1), True)
            )
    else:
        plan.groups.append(ChunkGroup(ready_time, n_blocks, block_bytes, (0, L)))
    return plan
