"""Node-to-node protocol messages.

One dataclass per message kind; the binary envelope in
:mod:`shardraft.wire` gives each kind a stable tag.  All messages carry
the sender and, where relevant, the sender's packed epoch+term so stale
traffic can be rejected by comparison alone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from .types import ClusterConfig, ClusterId, LogEntry, NodeId


class VoteVerdict(enum.Enum):
    GRANT = 1
    DENY = 2
    PULL = 3  # "your epoch is behind; pull committed entries instead"


@dataclass(frozen=True)
class VoteRequest:
    candidate: NodeId
    at: int  # packed EpochTerm of the candidacy
    last_index: int
    last_at: int


@dataclass(frozen=True)
class VoteResponse:
    voter: NodeId
    at: int
    verdict: VoteVerdict


@dataclass(frozen=True)
class AppendEntries:
    leader: NodeId
    at: int
    prev_index: int
    prev_at: int
    entries: tuple[LogEntry, ...]
    leader_commit: int


@dataclass(frozen=True)
class AppendResponse:
    follower: NodeId
    at: int
    ok: bool
    match_index: int = 0
    # First index of the conflicting term on reject; 0 asks for a snapshot.
    conflict_index: int = 0


@dataclass(frozen=True)
class CommitNotify:
    """Announces that a split-completion entry committed, so every member
    of the pre-split cluster can finish (or start pulling).  The same tag
    doubles as its acknowledgment with ``is_ack`` set."""

    sender: NodeId
    old_cluster_id: ClusterId
    config_id: str          # the committed split-completion config
    commit_index: int       # sender's commit index covering it
    is_ack: bool = False


@dataclass(frozen=True)
class PullRequest:
    sender: NodeId
    from_index: int  # caller holds entries through this index
    epoch: int = 0   # caller's epoch; incomparable eras get history instead


class PullStatus(enum.Enum):
    ENTRIES = 1
    NOT_READY = 2   # source has nothing committed past from_index
    HISTORY = 3     # source's log no longer reaches back; records instead


@dataclass(frozen=True)
class PullResponse:
    sender: NodeId
    status: PullStatus
    from_index: int = 0
    entries: tuple[LogEntry, ...] = ()
    source_commit: int = 0
    # HISTORY payload: completed-reconfiguration records (wire-encoded) and,
    # when the requester's lineage is known, its range's state at the cut.
    history_blob: bytes = b""
    residue_blob: bytes = b""


@dataclass(frozen=True)
class MergePrepare:
    sender: NodeId
    coordinator_cluster: ClusterId
    tx_blob: bytes  # wire-encoded MergeTxRecord (intent, no decision)
    ttl: int = 2    # forward-to-leader hops left


@dataclass(frozen=True)
class MergePrepareResponse:
    sender: NodeId
    tx_id: str
    cluster_id: ClusterId
    ok: bool
    epoch: int  # responder's epoch, collected for the merged epoch
    ttl: int = 2


@dataclass(frozen=True)
class MergeCommit:
    sender: NodeId
    tx_id: str
    config: ClusterConfig  # MERGE_NEW or MERGE_ABORT
    ttl: int = 2


@dataclass(frozen=True)
class MergeCommitAck:
    sender: NodeId
    tx_id: str
    cluster_id: ClusterId
    ttl: int = 2


@dataclass(frozen=True)
class SnapshotRequest:
    sender: NodeId
    tx_id: str
    cluster_id: ClusterId  # whose snapshot is wanted
    offset: int


@dataclass(frozen=True)
class SnapshotChunk:
    sender: NodeId
    tx_id: str
    cluster_id: ClusterId
    ready: bool
    offset: int = 0
    total: int = 0
    data: bytes = b""
    checksum: int = 0  # crc32 of the whole snapshot blob


@dataclass(frozen=True)
class InstallSnapshot:
    """Leader-pushed state transfer for a follower whose log predates the
    leader's log base (post-merge catch-up)."""

    leader: NodeId
    at: int
    offset: int
    total: int
    data: bytes
    checksum: int
    done: bool


Message = (
    VoteRequest | VoteResponse | AppendEntries | AppendResponse | CommitNotify
    | PullRequest | PullResponse | MergePrepare | MergePrepareResponse
    | MergeCommit | MergeCommitAck | SnapshotRequest | SnapshotChunk
    | InstallSnapshot
)
