from typing import Optional

import pandas as pd

from kvpool.core.dataset import KVPoolDataset
from kvpool.harness.metrics import MetricsReport, compute_metrics

DATA_KEYS = ["requests", "transfers", "routing", "summary"]


class SimulationResult(KVPoolDataset):
    """
    Outcome of one simulation run: per-request, per-transfer and routing tables,
    the aggregate summary, and the settings that produced them.

    Attributes:
        requests : pd.DataFrame
            One row per request, columns harness.metrics.REQUEST_COLUMNS.
        transfers : pd.DataFrame
            One row per finished or aborted transfer.
        routing : pd.DataFrame
            One row per routing decision.
        summary : pd.DataFrame
            A single row of aggregates.
    """

    dataset_type = "simulation_result"

    def __init__(self, directory=None, dictionary=None):
        self.requests: Optional[pd.DataFrame] = None
        self.transfers: Optional[pd.DataFrame] = None
        self.routing: Optional[pd.DataFrame] = None
        self.summary: Optional[pd.DataFrame] = None
        super().__init__(directory=directory, dictionary=dictionary, data_keys=DATA_KEYS)
        self.cleanup_reports = []

    @property
    def report(self) -> MetricsReport:
        return compute_metrics(self.requests, self.transfers)

    def __getitem__(self, key):
        return self.summary.iloc[0][key]

    def summary_line(self) -> str:
        s = self.summary.iloc[0]
        return (
            f"{int(s['num_completed'])}/{int(s['num_requests'])} requests completed, "
            f"TTFT mean {s['mean_ttft']:.4f}s p99 {s['p99_ttft']:.4f}s, "
            f"JCT mean {s['mean_jct']:.4f}s p99 {s['p99_jct']:.4f}s, "
            f"TPOT mean {s['mean_tpot']:.4f}s p99 {s['p99_tpot']:.4f}s, "
            f"reuse ratio {s['reuse_ratio']:.3f}"
        )
