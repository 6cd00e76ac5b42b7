from .batching import admit_batch
from .cost_model import CachedLocation, CostModel, ReuseDecision, ReuseEstimate, locations_from_match
from .instance import InferenceInstance, PrefillPlan, RemoteFetch
from .state import Phase, RequestState
from .timing import (
    BatchingConfig,
    EngineTimingModel,
    build_batching_config,
    build_timing_model,
)
