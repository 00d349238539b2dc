"""Long-term recovery support: durable reconfiguration history and the
loose-consistency naming registry of last resort.

History records outlive log compaction.  A node whose peers have merged
away (and garbage-collected the shared log) learns what became of its
cluster from these records; a record is dropped only once every involved
node is known to have completed the reconfiguration.  The naming registry
is DNS-like: upserted after completed reconfigurations, possibly stale,
never fabricating members.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .types import ClusterId, KeyRange, KeySpan, NodeId


def range_to_obj(kr: KeyRange) -> list:
    return [[s.lo, s.hi] for s in kr.spans]


def range_from_obj(obj: list) -> KeyRange:
    return KeyRange.of(KeySpan(lo, hi) for lo, hi in obj)


@dataclass
class HistoryRecord:
    """One completed (or completing) reconfiguration, durable forever until
    every involved node is known to have caught up."""

    kind: str                      # split | merge | membership
    config_id: str                 # id of the reconfiguration's final config
    epoch: int                     # epoch the survivors run at
    from_clusters: list[dict]      # [{cluster_id, members, range}]
    to_clusters: list[dict]
    involved: list[NodeId]
    completed: dict[str, bool] = field(default_factory=dict)
    tx_id: str = ""                # merges only

    def to_obj(self) -> dict:
        return {
            "kind": self.kind,
            "config_id": self.config_id,
            "epoch": self.epoch,
            "from": self.from_clusters,
            "to": self.to_clusters,
            "involved": sorted(self.involved),
            "completed": dict(sorted(self.completed.items())),
            "tx_id": self.tx_id,
        }

    @staticmethod
    def from_obj(obj: dict) -> "HistoryRecord":
        return HistoryRecord(
            kind=obj["kind"], config_id=obj["config_id"], epoch=obj["epoch"],
            from_clusters=list(obj["from"]), to_clusters=list(obj["to"]),
            involved=list(obj["involved"]), completed=dict(obj["completed"]),
            tx_id=obj.get("tx_id", ""),
        )

    def all_complete(self) -> bool:
        return all(self.completed.get(n, False) for n in self.involved)


class ReconfigHistory:
    """Ordered reconfiguration records with completion-gated GC."""

    def __init__(self, records: Optional[Iterable[HistoryRecord]] = None) -> None:
        self.records: list[HistoryRecord] = list(records or [])

    def add(self, record: HistoryRecord) -> None:
        existing = self.find(record.config_id)
        if existing is not None:
            for n, done in record.completed.items():
                if done:
                    existing.completed[n] = True
            return
        self.records.append(record)

    def find(self, config_id: str) -> Optional[HistoryRecord]:
        for rec in self.records:
            if rec.config_id == config_id:
                return rec
        return None

    def find_tx(self, tx_id: str) -> Optional[HistoryRecord]:
        for rec in self.records:
            if rec.tx_id == tx_id:
                return rec
        return None

    def mark_complete(self, config_id: str, node: NodeId) -> None:
        rec = self.find(config_id)
        if rec is not None:
            rec.completed[node] = True

    def gc(self) -> list[HistoryRecord]:
        """Drop fully-confirmed records; returns what was removed."""
        done = [r for r in self.records if r.all_complete()]
        self.records = [r for r in self.records if not r.all_complete()]
        return done

    def to_objs(self) -> list[dict]:
        return [r.to_obj() for r in self.records]

    def encode(self) -> bytes:
        return json.dumps(self.to_objs(), sort_keys=True).encode("utf-8")

    @staticmethod
    def decode(blob: bytes) -> "ReconfigHistory":
        return ReconfigHistory(HistoryRecord.from_obj(o) for o in json.loads(blob))

    @staticmethod
    def from_objs(objs: Iterable[dict]) -> "ReconfigHistory":
        return ReconfigHistory(HistoryRecord.from_obj(o) for o in objs)


@dataclass
class NamingEntry:
    cluster_id: ClusterId
    members: tuple[NodeId, ...]
    key_range: KeyRange
    epoch: int

    def to_obj(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "members": list(self.members),
            "range": range_to_obj(self.key_range),
            "epoch": self.epoch,
        }


class NamingRegistry:
    """Cluster-id -> (members, range, epoch) with last-writer-wins upserts.

    Lookups may return stale entries (a merged-away cluster lingers until
    its successor re-registers); callers must tolerate that.  Members are
    only ever copied from registrations, never invented.
    """

    def __init__(self) -> None:
        self.entries: dict[ClusterId, NamingEntry] = {}

    def register(self, cluster_id: ClusterId, members: Iterable[NodeId],
                 key_range: KeyRange, epoch: int) -> None:
        prior = self.entries.get(cluster_id)
        if prior is not None and prior.epoch > epoch:
            return  # stale writer
        self.entries[cluster_id] = NamingEntry(
            cluster_id, tuple(sorted(set(members))), key_range, epoch)

    def unregister(self, cluster_id: ClusterId) -> None:
        self.entries.pop(cluster_id, None)

    def get(self, cluster_id: ClusterId) -> Optional[NamingEntry]:
        return self.entries.get(cluster_id)

    def lookup_range(self, query: KeyRange) -> list[NamingEntry]:
        out = [e for e in self.entries.values() if e.key_range.overlaps(query)]
        return sorted(out, key=lambda e: e.cluster_id)

    def list_all(self) -> list[NamingEntry]:
        return sorted(self.entries.values(), key=lambda e: e.cluster_id)
