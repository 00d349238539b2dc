"""The replicated state machine (a string key/value map) and client-side
routing across range-sharded clusters.

Commands travel as opaque bytes in log entries; this module owns their
encoding and the deterministic apply function.  Reads never enter the log:
leaders serve them from applied state.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .recovery import NamingRegistry
from .types import ClusterId, KeyRange, LogEntry, NodeId, PayloadKind

CMD_PUT = 1
CMD_DELETE = 3


def encode_command(op: int, key: str, value: str = "") -> bytes:
    w = wire.Writer()
    w.u8(op)
    w.string(key)
    if op == CMD_PUT:
        w.string(value)
    return w.take()


def decode_command(data: bytes) -> dict:
    r = wire.Reader(data)
    op = r.u8()
    out = {"op": op, "key": r.string()}
    if op == CMD_PUT:
        out["value"] = r.string()
    return out


def apply_entry(state: dict[str, str], entry: LogEntry) -> None:
    """Apply one committed entry in log order.  Config and no-op entries
    leave the map untouched; out-of-range commands never reach here, they
    are rejected at proposal time.  Commands are opaque bytes to the core,
    so anything undecodable applies as a deterministic no-op."""
    if entry.kind != PayloadKind.COMMAND:
        return
    try:
        cmd = decode_command(entry.command)
    except wire.WireError:
        return
    if cmd["op"] == CMD_PUT:
        state[cmd["key"]] = cmd["value"]
    elif cmd["op"] == CMD_DELETE:
        state.pop(cmd["key"], None)


def entry_digest(entry: LogEntry) -> str:
    return hashlib.sha256(wire.encode_entry(entry)).hexdigest()[:16]


def state_digest(state: dict[str, str]) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(b"\x00")
        h.update(state[k].encode())
        h.update(b"\x01")
    return h.hexdigest()[:16]


@dataclass
class RouteEntry:
    key_range: KeyRange
    cluster_id: ClusterId
    members: tuple[NodeId, ...]
    epoch: int = 0
    leader_hint: Optional[NodeId] = None


class RouteTable:
    """Client-side map from key to owning cluster, refreshed from the naming
    registry and corrected by redirects.

    The registry is loosely consistent, so several (stale and fresh) entries
    may claim a key; routing prefers the highest epoch and callers fall back
    on redirects when even that one is stale."""

    def __init__(self) -> None:
        self.entries: list[RouteEntry] = []

    def refresh(self, registry: NamingRegistry) -> None:
        hints = {e.cluster_id: e.leader_hint for e in self.entries}
        self.entries = [
            RouteEntry(e.key_range, e.cluster_id, e.members, e.epoch,
                       hints.get(e.cluster_id))
            for e in registry.list_all()
        ]

    def route(self, key: str) -> Optional[RouteEntry]:
        owners = [e for e in self.entries if e.key_range.contains(key)]
        if not owners:
            return None
        return max(owners, key=lambda e: (e.epoch, e.cluster_id))

    def set_leader_hint(self, cluster_id: ClusterId, leader: Optional[NodeId]) -> None:
        for entry in self.entries:
            if entry.cluster_id == cluster_id:
                entry.leader_hint = leader

    def drop_cluster(self, cluster_id: ClusterId) -> None:
        self.entries = [e for e in self.entries if e.cluster_id != cluster_id]
