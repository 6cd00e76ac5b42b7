from dataclasses import dataclass

from kvpool.core.exceptions import ConfigError
from kvpool.core.types import as_number


@dataclass(frozen=True)
class EngineTimingModel:
    """
    Simulated compute times of an inference instance.

    prefill_cost(n_new, n_context) = alpha_p * n_new + gamma_p * n_new * n_context,
    where n_context is the number of tokens attended to: the request's whole prompt
    plus the prompts of the other requests in its batch.

    decode_step_cost(batch) = alpha_d + delta_d * batch.

    Reading n cached blocks from DRAM costs dram_fetch_overhead plus
    n * swap_cost_per_block.
    """

    alpha_p: float = 3.0e-5
    gamma_p: float = 5.0e-9
    alpha_d: float = 0.02
    delta_d: float = 2.0e-4
    swap_cost_per_block: float = 4.4e-4
    dram_fetch_overhead: float = 4.0e-3

    def __post_init__(self):
        for name in ("alpha_p", "gamma_p", "alpha_d", "delta_d", "swap_cost_per_block"):
            if getattr(self, name) <= 0:
                raise ConfigError(
                    f"must be positive, got {getattr(self, name)}", path=f"engine.timing.{name}"
                )
        if self.dram_fetch_overhead < 0:
            raise ConfigError(
                f"must be non-negative, got {self.dram_fetch_overhead}",
                path="engine.timing.dram_fetch_overhead",
            )

    def prefill_cost(self, n_new_tokens: int, n_context_tokens: int) -> float:
        return self.alpha_p * n_new_tokens + self.gamma_p * n_new_tokens * n_context_tokens

    def decode_step_cost(self, batch_size: int, mean_context: float = 0.0) -> float:
        return self.alpha_d + self.delta_d * batch_size

    def swap_cost(self, n_blocks: int) -> float:
        return n_blocks * self.swap_cost_per_block

    def dram_fetch_cost(self, n_blocks: int) -> float:
        if n_blocks <= 0:
            return 0.0
        return self.dram_fetch_overhead + self.swap_cost(n_blocks)


def build_timing_model(settings: dict) -> EngineTimingModel:
    section = settings["engine"]["timing"]
    unknown = sorted(set(section) - set(EngineTimingModel.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"unknown field(s) {', '.join(unknown)}", path="engine.timing")
    return EngineTimingModel(
        **{k: as_number(v, f"engine.timing.{k}") for k, v in section.items()}
    )


@dataclass(frozen=True)
class BatchingConfig:
    max_batch_tokens: int = 4096
    max_batch_size: int = 4
    max_decode_batch: int = 64
    schedule_tick: float = 0.01
    cost_model: bool = True

    def __post_init__(self):
        for name in ("max_batch_tokens", "max_batch_size", "max_decode_batch", "schedule_tick"):
            if getattr(self, name) <= 0:
                raise ConfigError(
                    f"must be positive, got {getattr(self, name)}", path=f"engine.{name}"
                )


def build_batching_config(settings: dict) -> BatchingConfig:
    section = settings["engine"]
    return BatchingConfig(
        max_batch_tokens=as_number(section["max_batch_tokens"], "engine.max_batch_tokens", integer=True),
        max_batch_size=as_number(section["max_batch_size"], "engine.max_batch_size", integer=True),
        max_decode_batch=as_number(section["max_decode_batch"], "engine.max_decode_batch", integer=True),
        schedule_tick=as_number(section["schedule_tick"], "engine.schedule_tick"),
        cost_model=bool(section["cost_model"]),
    )
