from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, Optional

import numpy as np
import pandas as pd


@dataclass
class RequestRecord:
    """Outcome of one request. Times are simulated seconds; latencies are None when
    the request did not get that far."""

    request_id: int
    session_id: str
    turn: int
    arrival: float
    ttft: Optional[float]
    ttst: Optional[float]
    jct: Optional[float]
    tpot: Optional[float]
    prefill_tokens_computed: int
    tokens_reused: int
    matched_tokens: int
    bytes_transferred: float
    decision: str
    status: str
    prefill_instance: str
    decode_instance: str
    prompt_len: int
    gen_len: int


REQUEST_COLUMNS = [f.name for f in fields(RequestRecord)]


def percentile_nearest_rank(values, q: float = 99.0) -> float:
    """Nearest-rank percentile: the smallest value with at least q% of the values
    at or below it."""
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        return float("nan")
    rank = int(np.ceil(q / 100.0 * len(v)))
    return float(v[max(rank, 1) - 1])


@dataclass
class MetricsReport:
    requests: pd.DataFrame
    summary: Dict[str, float]

    def __getitem__(self, key):
        return self.summary[key]

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.summary])


def requests_frame(records: Iterable[RequestRecord]) -> pd.DataFrame:
    df = pd.DataFrame([asdict(r) for r in records], columns=REQUEST_COLUMNS)
    return df.sort_values("request_id", kind="stable").reset_index(drop=True)


def compute_metrics(records, transfers: Optional[pd.DataFrame] = None) -> MetricsReport:
    """
    Aggregate per-request records.

    Parameters
    ----------
    records: iterable of RequestRecord, or a DataFrame with REQUEST_COLUMNS
    transfers: pd.DataFrame, optional
        Transfer records; completed ones enter the call and byte totals.

    Returns
    -------
    MetricsReport
        Means and nearest-rank P99 over completed requests. TPOT only covers
        requests with gen_len > 1, TTST likewise.
    """
    if isinstance(records, pd.DataFrame):
        df = records.sort_values("request_id", kind="stable").reset_index(drop=True)
    else:
        df = requests_frame(records)
    done = df[df["status"] == "ok"]

    summary = {
        "num_requests": int(len(df)),
        "num_completed": int(len(done)),
        "num_failed": int((df["status"] != "ok").sum()),
    }
    for metric in ("ttft", "ttst", "jct", "tpot"):
        values = done[metric].dropna().astype(float).to_numpy()
        summary[f"mean_{metric}"] = float(values.mean()) if len(values) else float("nan")
        summary[f"p99_{metric}"] = percentile_nearest_rank(values, 99.0)

    prompt_tokens = int(done["prompt_len"].sum())
    reused = int(done["tokens_reused"].sum())
    summary["prompt_tokens"] = prompt_tokens
    summary["tokens_reused"] = reused
    summary["reuse_ratio"] = reused / prompt_tokens if prompt_tokens else 0.0
    summary["prefill_tokens_computed"] = int(done["prefill_tokens_computed"].sum())
    summary["p2d_bytes"] = float(done["bytes_transferred"].sum())

    if transfers is not None and len(transfers):
        ok = transfers[transfers["status"] == "done"]
        summary["transfer_calls"] = int(ok["n_calls"].sum())
        summary["transfer_bytes"] = float(ok["bytes"].sum())
    else:
        summary["transfer_calls"] = 0
        summary["transfer_bytes"] = 0.0
    return MetricsReport(df, summary)
