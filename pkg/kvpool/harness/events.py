import heapq
import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, List, Optional


class EventKind(str, Enum):
    Arrival = "Arrival"
    PrefillDone = "PrefillDone"
    TransferChunkDone = "TransferChunkDone"
    DecodeStep = "DecodeStep"
    ResponseDone = "ResponseDone"
    Heartbeat = "Heartbeat"
    FailureInject = "FailureInject"
    ScheduleTick = "ScheduleTick"
    Membership = "Membership"


@dataclass(order=True)
class SimEvent:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(compare=False, default=None)


class EventQueue:
    """Events ordered by (time, seq); seq is assigned at push and strictly
    increasing, so simultaneous events keep their enqueue order."""

    def __init__(self):
        self._heap: List[SimEvent] = []
        self._seq = itertools.count()

    def __len__(self):
        return len(self._heap)

    def __bool__(self):
        return bool(self._heap)

    def push(self, time: float, kind, payload=None) -> SimEvent:
        event = SimEvent(float(time), next(self._seq), EventKind(kind), payload)
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)

    def peek(self) -> Optional[SimEvent]:
        return self._heap[0] if self._heap else None

    def count(self, kind) -> int:
        kind = EventKind(kind)
        return sum(1 for e in self._heap if e.kind == kind)
