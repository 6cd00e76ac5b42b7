"""
Domain types shared by every kvpool subpackage.

The value types here are plain dataclasses. They validate themselves on
construction and raise ConfigError, so an invalid configuration is rejected before
any simulation starts.
"""

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from kvpool.core.exceptions import ConfigError

TokenList = Tuple[int, ...]


class Medium(str, Enum):
    HBM = "HBM"
    DRAM = "DRAM"


class AllocType(str, Enum):
    HBM = "HBM"
    DRAM = "DRAM"
    Mixed = "Mixed"


class InstanceKind(str, Enum):
    PrefillOnly = "PrefillOnly"
    DecodeOnly = "DecodeOnly"
    PDColocated = "PDColocated"


class BlockLayout(str, Enum):
    Discrete = "Discrete"
    Aggregated = "Aggregated"


class CachingDesign(str, Enum):
    """Caching capability ladder for disaggregated prefill/decode pairs.

    PDBasic keeps nothing. PDCaching1 keeps prompt KV on the prefill instance.
    PDCaching2 additionally keeps KV on the decode instance and transfers
    incrementally. PDCaching3 additionally returns decode-produced KV to the
    prefill instance.
    """

    PDBasic = "PDBasic"
    PDCaching1 = "PDCaching1"
    PDCaching2 = "PDCaching2"
    PDCaching3 = "PDCaching3"

    @property
    def level(self) -> int:
        return list(CachingDesign).index(self)

    def at_least(self, other: "CachingDesign") -> bool:
        return self.level >= other.level


def parse_enum(enum_cls, value, path=None):
    """Convert a settings value into a member of enum_cls, raising ConfigError."""
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        options = ", ".join(m.value for m in enum_cls)
        raise ConfigError(
            f"{value!r} is not a valid {enum_cls.__name__} (expected one of {options})",
            path=path,
        )


def _require_positive(value, name, allow_zero=False):
    if isinstance(value, bool) or not isinstance(value, (int, float, np.integer)):
        raise ConfigError(f"expected a number, got {value!r}", path=name)
    if value < 0 or (value == 0 and not allow_zero):
        bound = "non-negative" if allow_zero else "positive"
        raise ConfigError(f"must be {bound}, got {value}", path=name)


@dataclass(frozen=True, order=True)
class BlockAddr:
    """Address of one KV block. The address encodes its owning instance."""

    instance_id: str
    medium: Medium
    block_index: int

    def __str__(self):
        return f"{self.instance_id}:{self.medium.value}:{self.block_index}"


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 40
    hidden_size: int = 5120
    kv_bytes_per_token_per_layer: Optional[int] = None
    context_window: int = 4096

    def __post_init__(self):
        _require_positive(self.num_layers, "model.num_layers")
        _require_positive(self.hidden_size, "model.hidden_size")
        _require_positive(self.context_window, "model.context_window")
        if self.kv_bytes_per_token_per_layer is None:
            # K and V, fp16
            object.__setattr__(
                self, "kv_bytes_per_token_per_layer", 2 * self.hidden_size * 2
            )
        _require_positive(
            self.kv_bytes_per_token_per_layer, "model.kv_bytes_per_token_per_layer"
        )

    def kv_bytes(self, n_tokens: int) -> int:
        return n_tokens * self.num_layers * self.kv_bytes_per_token_per_layer


@dataclass(frozen=True)
class BlockConfig:
    block_size: int = 16
    layout: BlockLayout = BlockLayout.Discrete

    def __post_init__(self):
        _require_positive(self.block_size, "block.block_size")
        object.__setattr__(
            self, "layout", parse_enum(BlockLayout, self.layout, "block.layout")
        )

    def storage_blocks_per_block(self, model: ModelConfig) -> int:
        """Number of physical pieces that make up one logical block of B tokens."""
        if self.layout == BlockLayout.Discrete:
            return 2 * model.num_layers
        return 1


@dataclass(frozen=True)
class ParallelismConfig:
    tp_degree: int = 1
    pp_degree: int = 1

    def __post_init__(self):
        for name in ("tp_degree", "pp_degree"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"expected an integer, got {value!r}", path=name)
            if value < 1:
                raise ConfigError(f"must be >= 1, got {value}", path=name)


@dataclass(frozen=True)
class InstanceSpec:
    instance_id: str
    kind: InstanceKind
    parallelism: ParallelismConfig = field(default_factory=ParallelismConfig)
    hbm_capacity_blocks: int = 4096
    dram_capacity_blocks: int = 0
    caching_enabled: bool = True

    def __post_init__(self):
        if not isinstance(self.instance_id, str) or not self.instance_id:
            raise ConfigError(
                f"instance_id must be a non-empty string, got {self.instance_id!r}",
                path="instance_id",
            )
        object.__setattr__(
            self, "kind", parse_enum(InstanceKind, self.kind, "kind")
        )
        _require_positive(self.hbm_capacity_blocks, "hbm_capacity_blocks")
        _require_positive(
            self.dram_capacity_blocks, "dram_capacity_blocks", allow_zero=True
        )


@dataclass
class Request:
    """One inference call of a session.

    ``response_tokens`` are the token IDs the simulated model emits. They are taken
    from the next turn's prompt when the workload provides one, so KV produced
    during decode is reusable by the following turn.
    """

    request_id: int
    session_id: str
    turn_index: int
    prompt: TokenList
    gen_len: int
    arrival_time: float = 0.0
    sampling_params: Dict[str, Any] = field(default_factory=dict)
    response_tokens: TokenList = ()

    def __post_init__(self):
        if self.gen_len < 1:
            raise ConfigError(
                f"gen_len must be positive, got {self.gen_len}",
                path=f"request {self.request_id}",
            )
        if self.turn_index < 0:
            raise ConfigError(
                f"turn_index must be non-negative, got {self.turn_index}",
                path=f"request {self.request_id}",
            )

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    def check_context(self, model: ModelConfig):
        if self.prompt_len + self.gen_len > model.context_window:
            raise ConfigError(
                f"prompt ({self.prompt_len}) + gen_len ({self.gen_len}) exceeds the "
                f"context window ({model.context_window})",
                path=f"request {self.request_id}",
            )


def tokens_to_blocks(n_tokens: int, cfg: BlockConfig) -> int:
    """Number of blocks needed to hold n_tokens. Partial blocks count as whole."""
    return -(-n_tokens // cfg.block_size)


def full_blocks(n_tokens: int, cfg: BlockConfig) -> int:
    """Number of completely filled blocks, i.e. the block-aligned truncation."""
    return n_tokens // cfg.block_size


def block_tags(tokens: Sequence[int], block_size: int, layer_group: str = "all") -> List[str]:
    """
    Content tags for every block (including a trailing partial one) of tokens.

    Tags are chained: the tag of block i depends on all tokens up to the end of
    block i, so identical prefixes yield identical tags and any difference earlier
    in the sequence changes every later tag.

    Parameters
    ----------
    tokens: sequence of int
    block_size: int
    layer_group: str
        Which layers the block stores. Logical blocks hold all layers.

    Returns
    -------
    list of str, one hex digest per block
    """
    data = np.asarray(tokens, dtype=np.int64)
    tags = []
    previous = layer_group.encode()
    for start in range(0, len(data), block_size):
        h = hashlib.blake2b(previous, digest_size=8)
        h.update(data[start : start + block_size].tobytes())
        previous = h.digest()
        tags.append(h.hexdigest())
    return tags


def as_number(value, path: str, integer: bool = False, allow_none: bool = False):
    """
    Convert a settings value to float (or int).

    YAML 1.1 reads exponents without a sign (``5.0e10``) as strings, so numeric
    strings are accepted too.
    """
    if value is None and allow_none:
        return None
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}", path=path)
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a number, got {value!r}", path=path)
    if integer:
        if number != int(number):
            raise ConfigError(f"expected an integer, got {value!r}", path=path)
        return int(number)
    return number
