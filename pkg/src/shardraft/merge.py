"""Cluster merge support: transaction records for the cluster-level
two-phase commit, and snapshot assembly for the data-exchange phase.

The merge decision is a 2PC between whole clusters, recorded in each
cluster's own log; the data exchange unions per-cluster snapshots taken at
each cluster's cut point, after which the merged cluster restarts its log
with the merge config as first entry.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import wire
from .types import (
    ClusterId,
    ConfigError,
    KeyRange,
    MergeTxRecord,
    NodeId,
    Participant,
    TxDecision,
)


def merged_cluster_id(participants: Iterable[ClusterId]) -> ClusterId:
    return "+".join(sorted(participants))


def build_tx(tx_id: str, coordinator: ClusterId, participants: Iterable[Participant],
             resume_members: Iterable[NodeId] = ()) -> MergeTxRecord:
    parts = tuple(sorted(participants, key=lambda p: p.cluster_id))
    if len(parts) < 2:
        raise ConfigError("a merge needs at least two clusters")
    if coordinator not in {p.cluster_id for p in parts}:
        raise ConfigError("coordinator must be one of the merging clusters")
    resume = set(resume_members)
    if resume:
        everyone = {n for p in parts for n in p.members}
        if not resume <= everyone:
            raise ConfigError("resume members outside the merging clusters")
        if not any(set(p.members) <= resume for p in parts):
            raise ConfigError(
                "resume members must cover at least one whole subcluster")
    return MergeTxRecord(
        tx_id=tx_id,
        coordinator=coordinator,
        participants=parts,
        merged_cluster_id=merged_cluster_id(p.cluster_id for p in parts),
        resume_members=tuple(sorted(set(resume_members))),
        decision=TxDecision.OK,
        deciding_cluster=coordinator,
    )


def epoch_for_merge(reported_epochs: Iterable[int]) -> int:
    """The merged cluster starts one epoch past the largest participant's."""
    return max(reported_epochs) + 1


def with_decision(tx: MergeTxRecord, cluster: ClusterId, ok: bool) -> MergeTxRecord:
    return MergeTxRecord(
        tx_id=tx.tx_id, coordinator=tx.coordinator, participants=tx.participants,
        merged_cluster_id=tx.merged_cluster_id, resume_members=tx.resume_members,
        decision=TxDecision.OK if ok else TxDecision.NO, deciding_cluster=cluster,
    )


@dataclass
class SnapshotXfer:
    """Reassembly buffer for one chunked snapshot transfer."""

    total: int = 0
    checksum: int = 0
    chunks: dict[int, bytes] = field(default_factory=dict)

    def add(self, offset: int, data: bytes, total: int, checksum: int) -> None:
        self.total = total
        self.checksum = checksum
        self.chunks[offset] = data

    def next_offset(self) -> int:
        got = 0
        while got in self.chunks:
            got += len(self.chunks[got])
        return got

    def complete(self) -> Optional[bytes]:
        blob = b""
        while len(blob) < self.total:
            part = self.chunks.get(len(blob))
            if part is None:
                return None
            blob += part
        if len(blob) != self.total or zlib.crc32(blob) != self.checksum:
            return None
        return blob


def chunk_of(blob: bytes, offset: int, size: int) -> tuple[bytes, int, int]:
    """(data, total, checksum) for one transfer chunk starting at offset."""
    return blob[offset:offset + size], len(blob), zlib.crc32(blob)


def union_snapshots(blobs: Iterable[bytes]) -> tuple[dict[str, str], KeyRange]:
    """Union the disjoint participant snapshots into one state + range."""
    from .types import EMPTY_RANGE

    merged: dict[str, str] = {}
    combined = EMPTY_RANGE
    total = 0
    for blob in blobs:
        snap = wire.decode_snapshot(blob)
        kv = snap["kv"]
        total += len(kv)
        merged.update(kv)
        combined = combined.union(snap["key_range"])
    if len(merged) != total:
        raise ConfigError("participant snapshots share keys; ranges not disjoint")
    return merged, combined
