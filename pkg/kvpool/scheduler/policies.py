"""
Routing policies. Each policy is a pure function of the request and a snapshot of
the cluster, so routing is deterministic.
"""

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence, Tuple


class Policy(str, Enum):
    LeastLoad = "LeastLoad"
    SessionId = "SessionId"
    PromptTree = "PromptTree"


@dataclass(frozen=True)
class ClusterSnapshot:
    """Live instance ids per kind and the load of every live instance, in tokens
    queued or in flight."""

    live: Dict[str, List[str]]
    loads: Dict[str, int]

    def of_kind(self, kind) -> List[str]:
        return sorted(self.live.get(getattr(kind, "value", kind), []))


@dataclass
class RoutingDecision:
    """
    Where a request runs.

    extra_holders lists (instance_id, lo, hi): the instance holds cached KV for
    prompt tokens [lo, hi) beyond what the chosen instance holds.
    """

    prefill_instance: str
    decode_instance: str = None
    matched_len: Dict[str, int] = field(default_factory=dict)
    extra_holders: List[Tuple[str, int, int]] = field(default_factory=list)
    alternatives: List[str] = field(default_factory=list)

    @property
    def chosen_instance(self) -> str:
        return self.prefill_instance


def least_load(candidates: Sequence[str], loads: Dict[str, int]) -> str:
    return min(candidates, key=lambda i: (loads.get(i, 0), i))


def session_hash(session_id: str, candidates: Sequence[str]) -> str:
    """Stable hash of session_id over the sorted candidates."""
    digest = hashlib.blake2b(str(session_id).encode(), digest_size=8).digest()
    return sorted(candidates)[int.from_bytes(digest, "big") % len(candidates)]


def longest_prefix(
    candidates: Sequence[str], matches: Dict[str, int], loads: Dict[str, int]
) -> str:
    """Longest match, then least load, then lowest id."""
    return min(candidates, key=lambda i: (-matches.get(i, 0), loads.get(i, 0), i))
