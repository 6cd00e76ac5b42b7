from .cluster import (
    CleanupReport,
    ClusterManager,
    FailureEvent,
    InstanceRecord,
    InstanceStatus,
    MembershipEvent,
    build_cluster_manager,
    build_failure_events,
    build_membership_events,
)
