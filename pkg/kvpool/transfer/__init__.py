from .network import CommunicatorSet, NetworkModel, Shard, build_network_model, repartition
from .planning import (
    Chunk,
    ChunkGroup,
    TransferMode,
    TransferPlan,
    bulk_mode,
    check_mode_layout,
    plan_transfer,
)
from .transfer import (
    TRANSFER_RECORD_COLUMNS,
    ReceiverAllocation,
    TransferEngine,
    TransferFlags,
    TransferHandle,
    TransferRecord,
)
