from .config import SimulationConfig, build_simulation_config
from .events import EventKind, EventQueue, SimEvent
from .metrics import (
    REQUEST_COLUMNS,
    MetricsReport,
    RequestRecord,
    compute_metrics,
    percentile_nearest_rank,
)
from .result import DATA_KEYS, SimulationResult
from .simulator import Simulator, run_simulation
from .workload import (
    KIND_DEFAULTS,
    WORKLOAD_KINDS,
    Session,
    Workload,
    WorkloadSpec,
    build_workload_spec,
    generate_workload,
    load_trace,
    write_trace,
)
