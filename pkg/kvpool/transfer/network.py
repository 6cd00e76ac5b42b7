"""
Network timing model and the repartitioning of KV shards between instances with
different tensor- and pipeline-parallel degrees.
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Dict, List, Tuple

from kvpool.core.exceptions import ConfigError
from kvpool.core.types import Medium, ParallelismConfig, as_number


@dataclass(frozen=True)
class NetworkModel:
    """
    Per-call overhead, bandwidth per link class, and control-message latency.

    HBM to HBM transfers use the fast path; any transfer touching DRAM uses the
    slow path. All times in simulated seconds, bandwidths in bytes per second per
    communicator.
    """

    per_call_overhead: float = 5.0e-6
    hbm_bandwidth: float = 5.0e10
    dram_bandwidth: float = 1.0e10
    control_rtt: float = 5.0e-5
    communicators_per_pair: int = 1

    def __post_init__(self):
        for name in ("per_call_overhead", "hbm_bandwidth", "dram_bandwidth", "control_rtt"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
                raise ConfigError(f"must be a positive number, got {value!r}", path=f"network.{name}")
        if self.dram_bandwidth > self.hbm_bandwidth:
            raise ConfigError(
                "DRAM bandwidth can not exceed HBM bandwidth", path="network.dram_bandwidth"
            )
        if not isinstance(self.communicators_per_pair, int) or self.communicators_per_pair < 1:
            raise ConfigError(
                f"must be a positive integer, got {self.communicators_per_pair!r}",
                path="network.communicators_per_pair",
            )

    def bandwidth(self, src_medium: Medium, dst_medium: Medium) -> float:
        if src_medium == Medium.HBM and dst_medium == Medium.HBM:
            return self.hbm_bandwidth
        return self.dram_bandwidth

    def call_time(
        self,
        bytes_per_call: float,
        bandwidth: float,
        src: ParallelismConfig = ParallelismConfig(),
        dst: ParallelismConfig = ParallelismConfig(),
        layers: Tuple[int, int] = (0, 1),
        num_layers: int = 1,
    ) -> float:
        """
        Duration of one logical call covering ``layers``.

        Every source rank sends its shards in parallel; a rank's time is the sum
        over its shards of (per-call overhead + shard bytes / bandwidth). The call
        finishes when the slowest rank does.
        """
        return _call_time(
            self.per_call_overhead, bytes_per_call, bandwidth, src, dst, layers, num_layers
        )


def build_network_model(settings: dict) -> NetworkModel:
    section = settings["network"]
    values = {
        k: as_number(section[k], f"network.{k}")
        for k in ("per_call_overhead", "hbm_bandwidth", "dram_bandwidth", "control_rtt")
    }
    values["communicators_per_pair"] = as_number(
        section["communicators_per_pair"], "network.communicators_per_pair", integer=True
    )
    return NetworkModel(**values)


@dataclass(frozen=True)
class Shard:
    """Part of the KV cache sent from one source rank to one destination rank.

    Ranks are (tp_rank, pp_stage). Heads are fractions of the head dimension,
    layers a half-open range.
    """

    src_rank: Tuple[int, int]
    dst_rank: Tuple[int, int]
    head_lo: Fraction
    head_hi: Fraction
    layer_lo: int
    layer_hi: int

    @property
    def head_fraction(self) -> Fraction:
        return self.head_hi - self.head_lo


def _layer_ranges(pp_degree: int, num_layers: int) -> List[Tuple[int, int]]:
    return [
        (s * num_layers // pp_degree, (s + 1) * num_layers // pp_degree)
        for s in range(pp_degree)
    ]


def repartition(
    src: ParallelismConfig, dst: ParallelismConfig, num_layers: int
) -> List[Shard]:
    """
    Split the KV cache between source and destination ranks.

    The head dimension is split evenly by each side's TP degree and layers into
    contiguous ranges by each side's PP degree. Each shard is the intersection of
    one source and one destination rank, so the shards partition the cache.
    """
    if num_layers < max(src.pp_degree, dst.pp_degree):
        raise ValueError(
            f"{num_layers} layers can not be split into {max(src.pp_degree, dst.pp_degree)} stages"
        )
    shards = []
    src_layers = _layer_ranges(src.pp_degree, num_layers)
    dst_layers = _layer_ranges(dst.pp_degree, num_layers)
    for s_pp, (s_lo, s_hi) in enumerate(src_layers):
        for d_pp, (d_lo, d_hi) in enumerate(dst_layers):
            lo, hi = max(s_lo, d_lo), min(s_hi, d_hi)
            if lo >= hi:
                continue
            for s_tp in range(src.tp_degree):
                sh_lo = Fraction(s_tp, src.tp_degree)
                sh_hi = Fraction(s_tp + 1, src.tp_degree)
                for d_tp in range(dst.tp_degree):
                    h_lo = max(sh_lo, Fraction(d_tp, dst.tp_degree))
                    h_hi = min(sh_hi, Fraction(d_tp + 1, dst.tp_degree))
                    if h_lo >= h_hi:
                        continue
                    shards.append(Shard((s_tp, s_pp), (d_tp, d_pp), h_lo, h_hi, lo, hi))
    return shards


@lru_cache(maxsize=4096)
def _call_time(overhead, bytes_per_call, bandwidth, src, dst, layers, num_layers):
    lo, hi = layers
    span = hi - lo
    per_rank: Dict[Tuple[int, int], float] = {}
    for shard in repartition(src, dst, num_layers):
        overlap = min(hi, shard.layer_hi) - max(lo, shard.layer_lo)
        if overlap <= 0:
            continue
        fraction = float(shard.head_fraction) * overlap / span
        per_rank[shard.src_rank] = (
            per_rank.get(shard.src_rank, 0.0) + overhead + bytes_per_call * fraction / bandwidth
        )
    return max(per_rank.values())


class CommunicatorSet:
    """
    The communicators between one ordered pair of instances.

    Calls are assigned round-robin and every communicator serves its calls in
    FIFO order, so calls sharing a communicator never overlap in time.
    """

    def __init__(self, n_communicators: int = 1):
        self.free_at = [0.0] * n_communicators
        self._next = 0

    def schedule(self, earliest_start: float, n_calls: int, duration: float) -> Tuple[float, float]:
        """
        Schedule n_calls calls of equal duration that may start at earliest_start.

        Returns
        -------
        (time the first call starts, time the last call finishes)
        """
        c = len(self.free_at)
        q, r = divmod(n_calls, c)
        first, finish = float("inf"), earliest_start
        for j in range(c):
            count = q + (1 if j < r else 0)
            if count == 0:
                continue
            comm = (self._next + j) % c
            start = max(self.free_at[comm], earliest_start)
            self.free_at[comm] = start + count * duration
            first = min(first, start)
            finish = max(finish, self.free_at[comm])
        self._next = (self._next + n_calls) % c
        if n_calls == 0:
            first = earliest_start
        return first, finish
