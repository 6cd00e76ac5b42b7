from .global_scheduler import (
    ROUTING_COLUMNS,
    GlobalScheduler,
    RoutingRecord,
    build_global_scheduler,
    build_prompt_trees,
)
from .policies import ClusterSnapshot, Policy, RoutingDecision, least_load, session_hash
from .prompt_trees import GlobalPromptTrees
