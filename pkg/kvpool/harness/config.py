from dataclasses import dataclass, field
from typing import List, Optional

from kvpool.cluster import (
    FailureEvent,
    MembershipEvent,
    build_failure_events,
    build_membership_events,
)
from kvpool.core.exceptions import ConfigError, ModeLayoutMismatch
from kvpool.core.settings import build_design, build_instance_specs, resolve_settings
from kvpool.core.types import (
    BlockConfig,
    CachingDesign,
    InstanceSpec,
    ModelConfig,
    as_number,
    parse_enum,
)
from kvpool.engine import BatchingConfig, EngineTimingModel, build_batching_config, build_timing_model
from kvpool.harness.workload import WorkloadSpec, build_workload_spec
from kvpool.mempool import MemPoolConfig, build_mempool_config
from kvpool.transfer import NetworkModel, TransferMode, build_network_model, check_mode_layout


def build_model_config(settings: dict) -> ModelConfig:
    section = settings["model"]
    unknown = sorted(set(section) - set(ModelConfig.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"unknown field(s) {', '.join(unknown)}", path="model")
    return ModelConfig(
        num_layers=as_number(section["num_layers"], "model.num_layers", integer=True),
        hidden_size=as_number(section["hidden_size"], "model.hidden_size", integer=True),
        kv_bytes_per_token_per_layer=as_number(
            section.get("kv_bytes_per_token_per_layer"),
            "model.kv_bytes_per_token_per_layer",
            integer=True,
            allow_none=True,
        ),
        context_window=as_number(section["context_window"], "model.context_window", integer=True),
    )


def build_block_config(settings: dict) -> BlockConfig:
    section = settings["block"]
    unknown = sorted(set(section) - {"block_size", "layout"})
    if unknown:
        raise ConfigError(f"unknown field(s) {', '.join(unknown)}", path="block")
    return BlockConfig(
        block_size=as_number(section["block_size"], "block.block_size", integer=True),
        layout=section["layout"],
    )


def build_transfer_mode(settings: dict, block: BlockConfig) -> TransferMode:
    mode = parse_enum(TransferMode, settings["transfer"]["mode"], "transfer.mode")
    try:
        check_mode_layout(mode, block.layout)
    except ModeLayoutMismatch as e:
        raise ConfigError(str(e), path="transfer.mode")
    return mode


@dataclass
class SimulationConfig:
    """Typed view of resolved settings; everything a simulation run needs."""

    settings: dict
    seed: int
    model: ModelConfig
    block: BlockConfig
    design: CachingDesign
    instances: List[InstanceSpec]
    timing: EngineTimingModel
    batching: BatchingConfig
    transfer_mode: TransferMode
    network: NetworkModel
    mempool: MemPoolConfig
    workload: WorkloadSpec
    failures: List[FailureEvent] = field(default_factory=list)
    membership: List[MembershipEvent] = field(default_factory=list)

    @property
    def instance_ids(self) -> List[str]:
        return [s.instance_id for s in self.instances]


def build_simulation_config(settings=None, overrides: Optional[List[str]] = None) -> SimulationConfig:
    """
    Resolve settings (a file name, a dict or None for the defaults) and build
    every typed configuration object from them.

    Raises
    ------
    ConfigError on the first invalid value.
    """
    settings = resolve_settings(settings, overrides)
    block = build_block_config(settings)
    config = SimulationConfig(
        settings=settings,
        seed=as_number(settings["seed"], "seed", integer=True),
        model=build_model_config(settings),
        block=block,
        design=build_design(settings),
        instances=build_instance_specs(settings),
        timing=build_timing_model(settings),
        batching=build_batching_config(settings),
        transfer_mode=build_transfer_mode(settings, block),
        network=build_network_model(settings),
        mempool=build_mempool_config(settings),
        workload=build_workload_spec(settings),
        failures=build_failure_events(settings),
        membership=build_membership_events(settings),
    )
    known = set(config.instance_ids)
    for event in config.failures + config.membership:
        if event.instance_id not in known:
            raise ConfigError(f"unknown instance {event.instance_id!r}", path="cluster")
    if config.model.num_layers < max(s.parallelism.pp_degree for s in config.instances):
        raise ConfigError("fewer layers than pipeline stages", path="cluster.pp_degree")
    return config
