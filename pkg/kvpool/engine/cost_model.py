"""
Cost model deciding, per request of a prefill batch, whether to reuse cached KV
blocks or to recompute them.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence

from kvpool.core.types import Medium, Request
from kvpool.engine.timing import EngineTimingModel
from kvpool.mempool import MatchResult


class ReuseDecision(str, Enum):
    Reuse = "Reuse"
    Recompute = "Recompute"


@dataclass(frozen=True)
class CachedLocation:
    """n_blocks cached blocks of a request held by instance_id on medium."""

    instance_id: str
    medium: Medium
    n_blocks: int
    remote: bool = False


@dataclass(frozen=True)
class ReuseEstimate:
    cached_tokens: int
    saved_time: float
    move_time: float
    decision: ReuseDecision


def locations_from_match(instance_id: str, match: MatchResult) -> List[CachedLocation]:
    """Split a local match into its HBM and DRAM parts."""
    n_hbm = sum(1 for m in match.media if m == Medium.HBM)
    n_dram = match.n_blocks - n_hbm
    locations = []
    if n_hbm:
        locations.append(CachedLocation(instance_id, Medium.HBM, n_hbm))
    if n_dram:
        locations.append(CachedLocation(instance_id, Medium.DRAM, n_dram))
    return locations


class CostModel:
    """
    Parameters
    ----------
    timing: EngineTimingModel
    block_size: int
    remote_move_time: callable
        (holder instance, n_blocks, medium) -> simulated seconds to fetch n_blocks
        from a remote holder. Required only when remote locations are passed.
    """

    def __init__(
        self,
        timing: EngineTimingModel,
        block_size: int,
        remote_move_time: Optional[Callable[[str, int, Medium], float]] = None,
    ):
        self.timing = timing
        self.block_size = block_size
        self.remote_move_time = remote_move_time

    def move_time(self, locations: Sequence[CachedLocation]) -> float:
        local_dram = sum(l.n_blocks for l in locations if not l.remote and l.medium == Medium.DRAM)
        t = self.timing.dram_fetch_cost(local_dram)
        for location in locations:
            if location.remote and location.n_blocks > 0:
                if self.remote_move_time is None:
                    raise ValueError("remote cached locations need a remote_move_time estimator")
                t += self.remote_move_time(location.instance_id, location.n_blocks, location.medium)
        return t

    def saved_time(self, prompt_len: int, cached_tokens: int, n_context: int) -> float:
        return self.timing.prefill_cost(prompt_len, n_context) - self.timing.prefill_cost(
            prompt_len - cached_tokens, n_context
        )

    def estimate(
        self, prompt_len: int, locations: Sequence[CachedLocation], n_context: int
    ) -> ReuseEstimate:
        cached = min(sum(l.n_blocks for l in locations) * self.block_size, prompt_len)
        if cached <= 0:
            return ReuseEstimate(0, 0.0, 0.0, ReuseDecision.Recompute)
        saved = self.saved_time(prompt_len, cached, n_context)
        move = self.move_time(locations)
        decision = ReuseDecision.Reuse if saved > move else ReuseDecision.Recompute
        return ReuseEstimate(cached, saved, move, decision)

    def should_reuse_cache(
        self,
        batch: Sequence[Request],
        match_results: Sequence[MatchResult],
        cached_locations: Optional[Sequence[Sequence[CachedLocation]]] = None,
        instance_id: str = "",
    ) -> List[ReuseDecision]:
        """
        Decide Reuse or Recompute for every request of a prefill batch.

        Parameters
        ----------
        batch: list of Request
        match_results: list of MatchResult
            Local matches, already capped to the reusable length.
        cached_locations: list of list of CachedLocation
            Remote extensions beyond each local match.
        instance_id: str
            The deciding instance, used to label local locations.

        Returns
        -------
        list of ReuseDecision
            Reuse iff the prefill time saved exceeds the time to bring the cached
            blocks into HBM. All prompts of the batch enter every request's context.
        """
        if cached_locations is None:
            cached_locations = [[] for _ in batch]
        batch_tokens = sum(r.prompt_len for r in batch)
        return [
            self.estimate(
                request.prompt_len,
                locations_from_match(instance_id, match) + list(remote),
                batch_tokens,
            ).decision
            for request, match, remote in zip(batch, match_results, cached_locations)
        ]
