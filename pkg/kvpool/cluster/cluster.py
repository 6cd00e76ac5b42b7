"""
Cluster membership, heartbeat failure detection and cleanup after an instance
failure.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional

from kvpool.core.exceptions import ConfigError, DuplicateId, UnknownId
from kvpool.core.types import InstanceKind, InstanceSpec, as_number
from kvpool.core.utils.logging_utils import logger


class InstanceStatus(str, Enum):
    Live = "Live"
    Failed = "Failed"
    Removed = "Removed"


@dataclass
class InstanceRecord:
    spec: InstanceSpec
    status: InstanceStatus = InstanceStatus.Live
    last_heartbeat: float = 0.0
    crashed: bool = False
    crash_time: Optional[float] = None


@dataclass
class CleanupReport:
    instance_id: str
    time: float
    freed_blocks: Dict[str, int] = field(default_factory=dict)
    failed_requests: List[int] = field(default_factory=list)
    aborted_transfers: List[int] = field(default_factory=list)


@dataclass(frozen=True)
class FailureEvent:
    time: float
    instance_id: str


@dataclass(frozen=True)
class MembershipEvent:
    time: float
    action: str
    instance_id: str


class ClusterManager:
    """
    Roster of instances and their status.

    A crashed instance stops answering at once but stays Live in the roster until
    a heartbeat round notices that it has been silent for failure_timeout; only
    then is the failure handled and broadcast.

    Parameters
    ----------
    heartbeat_interval: float
    failure_timeout: float
        Must be at least one heartbeat interval.
    """

    def __init__(self, heartbeat_interval: float = 1.0, failure_timeout: float = 3.0):
        if heartbeat_interval <= 0:
            raise ConfigError(
                f"must be positive, got {heartbeat_interval}", path="cluster.heartbeat_interval"
            )
        if failure_timeout < heartbeat_interval:
            raise ConfigError(
                f"must be at least the heartbeat interval ({heartbeat_interval}), got {failure_timeout}",
                path="cluster.failure_timeout",
            )
        self.heartbeat_interval = heartbeat_interval
        self.failure_timeout = failure_timeout
        self.records: Dict[str, InstanceRecord] = {}
        self.reports: List[CleanupReport] = []

    def __contains__(self, instance_id) -> bool:
        return instance_id in self.records

    def _record(self, instance_id: str) -> InstanceRecord:
        try:
            return self.records[instance_id]
        except KeyError:
            raise UnknownId(f"unknown instance {instance_id!r}")

    def register_instance(self, spec: InstanceSpec, now: float = 0.0):
        if spec.instance_id in self.records:
            raise DuplicateId(f"instance {spec.instance_id!r} is already registered")
        self.records[spec.instance_id] = InstanceRecord(spec, last_heartbeat=now)
        logger.debug(f"registered {spec.instance_id} ({spec.kind.value})")

    def remove_instance(self, instance_id: str):
        """Graceful removal: no new routes, in-flight work drains."""
        record = self._record(instance_id)
        if record.status == InstanceStatus.Live:
            record.status = InstanceStatus.Removed
            logger.info(f"removed {instance_id} from the roster")

    def status(self, instance_id: str) -> InstanceStatus:
        return self._record(instance_id).status

    def is_reachable(self, instance_id: str) -> bool:
        record = self.records.get(instance_id)
        return (
            record is not None
            and not record.crashed
            and record.status != InstanceStatus.Failed
        )

    def live_instances(self, kind: Optional[InstanceKind] = None) -> List[str]:
        return sorted(
            i
            for i, r in self.records.items()
            if r.status == InstanceStatus.Live and (kind is None or r.spec.kind == kind)
        )

    def crash(self, instance_id: str, now: float):
        record = self._record(instance_id)
        if not record.crashed:
            record.crashed = True
            record.crash_time = now
            logger.info(f"{instance_id} crashed at t={now:.6f}")

    @property
    def undetected_failures(self) -> List[str]:
        return sorted(
            i
            for i, r in self.records.items()
            if r.crashed and r.status != InstanceStatus.Failed
        )

    def heartbeat(self, now: float) -> List[str]:
        """
        One heartbeat round. Answering instances refresh their timestamp.

        Returns the ids whose silence exceeds failure_timeout; they are not yet
        marked Failed, see ``handle_failure``.
        """
        detected = []
        for instance_id, record in sorted(self.records.items()):
            if record.status == InstanceStatus.Failed:
                continue
            if not record.crashed:
                record.last_heartbeat = now
            elif now - record.last_heartbeat >= self.failure_timeout:
                detected.append(instance_id)
        return detected

    def handle_failure(
        self,
        instance_id: str,
        now: float,
        pools: Dict,
        transfers=None,
        trees=None,
        fail_requests: Optional[Callable[[str], List[int]]] = None,
    ) -> CleanupReport:
        """
        Mark instance_id Failed and clean up after it.

        Every live pool frees the blocks the failed instance allocated there,
        in-flight transfers from or to it are aborted, requests depending on it
        are failed (through fail_requests) and its prompt-tree entries are purged.
        """
        record = self._record(instance_id)
        record.status = InstanceStatus.Failed
        record.crashed = True
        report = CleanupReport(instance_id, now)
        for other in sorted(pools):
            if other == instance_id or not self.is_reachable(other):
                continue
            freed = pools[other].release_blocks_allocated_by(instance_id)
            report.freed_blocks[other] = len(freed)
        if transfers is not None:
            report.aborted_transfers = [
                h.transfer_id for h in transfers.abort_instance(instance_id, now)
            ]
        if fail_requests is not None:
            report.failed_requests = fail_requests(instance_id)
        if trees is not None:
            trees.purge_instance(instance_id)
        self.reports.append(report)
        logger.info(
            f"{instance_id} failed: freed {sum(report.freed_blocks.values())} remote blocks, "
            f"aborted {len(report.aborted_transfers)} transfers, "
            f"failed {len(report.failed_requests)} requests"
        )
        return report


def build_cluster_manager(settings: dict) -> ClusterManager:
    section = settings["cluster"]
    return ClusterManager(
        as_number(section["heartbeat_interval"], "cluster.heartbeat_interval"),
        as_number(section["failure_timeout"], "cluster.failure_timeout"),
    )


def build_failure_events(settings: dict) -> List[FailureEvent]:
    events = []
    for i, entry in enumerate(settings["cluster"].get("failures") or []):
        path = f"cluster.failures[{i}]"
        if not isinstance(entry, dict) or set(entry) != {"time", "instance_id"}:
            raise ConfigError("expected a mapping with keys time and instance_id", path=path)
        events.append(FailureEvent(as_number(entry["time"], f"{path}.time"), str(entry["instance_id"])))
    return events


def build_membership_events(settings: dict) -> List[MembershipEvent]:
    events = []
    for i, entry in enumerate(settings["cluster"].get("membership") or []):
        path = f"cluster.membership[{i}]"
        if not isinstance(entry, dict) or set(entry) != {"time", "action", "instance_id"}:
            raise ConfigError(
                "expected a mapping with keys time, action and instance_id", path=path
            )
        if entry["action"] != "remove":
            raise ConfigError(f"unsupported action {entry['action']!r}", path=f"{path}.action")
        events.append(
            MembershipEvent(as_number(entry["time"], f"{path}.time"), "remove", str(entry["instance_id"]))
        )
    return events
