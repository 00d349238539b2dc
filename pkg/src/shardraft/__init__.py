"""Sharded Raft-style replication with self-contained cluster split,
merge, and multi-node membership change, plus a deterministic simulator
and a range-sharded key-value service."""

from .types import (
    ClusterConfig,
    ConfigKind,
    EpochTerm,
    KeyRange,
    KeySpan,
    LogEntry,
    QuorumRule,
    SubCluster,
    pack_epoch_term,
    quorum_satisfied,
    stable_config,
    unpack_epoch_term,
)
from .membership import (
    heatmap_diffs,
    jc_vote_counts,
    plan_membership_change,
    quorum_overlap_guaranteed,
)
from .node import Node, Role, Timing

__all__ = [
    "ClusterConfig", "ConfigKind", "EpochTerm", "KeyRange", "KeySpan",
    "LogEntry", "QuorumRule", "SubCluster", "pack_epoch_term",
    "quorum_satisfied", "stable_config", "unpack_epoch_term",
    "heatmap_diffs", "jc_vote_counts", "plan_membership_change",
    "quorum_overlap_guaranteed", "Node", "Role", "Timing",
]
