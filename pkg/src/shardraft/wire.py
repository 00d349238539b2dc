"""Binary wire formats: the message envelope, the KV client protocol, and
the canonical encodings reused for digests, snapshots, and the on-disk log.

Layout (version 1), all integers big-endian:

=========  ==========================================================
primitive  encoding
=========  ==========================================================
u8/u16/    fixed-width unsigned
u32/u64
string     u16 length + UTF-8 bytes
bytes      u32 length + raw bytes
list       u16 count + items
optional   u8 flag (0/1) + value when 1
bool       u8
=========  ==========================================================

Envelope: ``u8 version | u8 tag | payload``.  One tag per message kind;
payload fields are encoded in dataclass field order using the primitives
above.  Compound values nest:

* KeySpan: string lo | optional string hi
* KeyRange: list of KeySpan
* QuorumRule: u8 kind | list of (list of string) groups | u16 size
* ClusterConfig: string config_id | string cluster_id | list members |
  KeyRange | u8 kind | QuorumRule election | QuorumRule commit |
  list SubCluster | u16 quorum_size | list final_members |
  optional MergeTxRecord | u32 epoch_new
* LogEntry: u64 index | u64 packed at | u8 payload kind | bytes command |
  optional ClusterConfig

KV client protocol: length-prefixed records, ``u32 length`` of the body
followed by ``u8 tag | fields``; tags PUT=1 GET=2 DELETE=3 OK=4
REDIRECT=5 ERROR=6.

Snapshot blob: string source cluster | KeyRange | u64 last index |
u64 last packed at | u32 count | count * (string key | string value);
the file/transfer header carries a crc32 of this blob.

The layout is an implementation constant: changing it requires bumping
``WIRE_VERSION``.
"""

from __future__ import annotations

import struct
from typing import Callable, Optional

from . import messages as m
from .types import (
    ClusterConfig,
    ConfigKind,
    EpochTerm,
    KeyRange,
    KeySpan,
    LogEntry,
    MergeTxRecord,
    Participant,
    PayloadKind,
    QuorumKind,
    QuorumRule,
    SubCluster,
    TxDecision,
)

WIRE_VERSION = 1


class WireError(ValueError):
    """Malformed or truncated wire data."""


# ---------------------------------------------------------------------------
# Primitive writers / readers


class Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, v: int) -> None:
        self.parts.append(struct.pack(">B", v))

    def u16(self, v: int) -> None:
        self.parts.append(struct.pack(">H", v))

    def u32(self, v: int) -> None:
        self.parts.append(struct.pack(">I", v))

    def u64(self, v: int) -> None:
        self.parts.append(struct.pack(">Q", v))

    def boolean(self, v: bool) -> None:
        self.u8(1 if v else 0)

    def string(self, s: str) -> None:
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WireError("string too long")
        self.u16(len(raw))
        self.parts.append(raw)

    def blob(self, b: bytes) -> None:
        self.u32(len(b))
        self.parts.append(b)

    def opt(self, v, write: Callable) -> None:
        if v is None:
            self.u8(0)
        else:
            self.u8(1)
            write(v)

    def seq(self, items, write: Callable) -> None:
        items = list(items)
        if len(items) > 0xFFFF:
            raise WireError("sequence too long")
        self.u16(len(items))
        for it in items:
            write(it)

    def take(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def _grab(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WireError("truncated record")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._grab(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._grab(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._grab(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._grab(8))[0]

    def boolean(self) -> bool:
        return self.u8() != 0

    def string(self) -> str:
        return self._grab(self.u16()).decode("utf-8")

    def blob(self) -> bytes:
        return self._grab(self.u32())

    def opt(self, read: Callable):
        return read() if self.u8() else None

    def seq(self, read: Callable) -> list:
        return [read() for _ in range(self.u16())]

    def done(self) -> bool:
        return self.pos == len(self.data)


# ---------------------------------------------------------------------------
# Compound values


def _w_span(w: Writer, s: KeySpan) -> None:
    w.string(s.lo)
    w.opt(s.hi, w.string)


def _r_span(r: Reader) -> KeySpan:
    return KeySpan(r.string(), r.opt(r.string))


def _w_range(w: Writer, kr: KeyRange) -> None:
    w.seq(kr.spans, lambda s: _w_span(w, s))


def _r_range(r: Reader) -> KeyRange:
    return KeyRange(spans=tuple(r.seq(lambda: _r_span(r))))


_QUORUM_TAGS = {QuorumKind.MAJORITY: 1, QuorumKind.JOINT_ALL: 2, QuorumKind.FIXED: 3}
_QUORUM_BY_TAG = {v: k for k, v in _QUORUM_TAGS.items()}


def _w_rule(w: Writer, rule: QuorumRule) -> None:
    w.u8(_QUORUM_TAGS[rule.kind])
    w.seq(rule.groups, lambda g: w.seq(g, w.string))
    w.u16(rule.size)


def _r_rule(r: Reader) -> QuorumRule:
    kind = _QUORUM_BY_TAG[r.u8()]
    n = r.u16()
    groups = tuple(tuple(r.seq(r.string)) for _ in range(n))
    size = r.u16()
    return QuorumRule(kind=kind, groups=groups, size=size)


def _w_sub(w: Writer, s: SubCluster) -> None:
    w.string(s.cluster_id)
    w.seq(s.members, w.string)
    _w_range(w, s.key_range)


def _r_sub(r: Reader) -> SubCluster:
    return SubCluster(r.string(), tuple(r.seq(r.string)), _r_range(r))


def _w_participant(w: Writer, p: Participant) -> None:
    w.string(p.cluster_id)
    w.seq(p.members, w.string)
    _w_range(w, p.key_range)
    w.u32(p.epoch)


def _r_participant(r: Reader) -> Participant:
    return Participant(r.string(), tuple(r.seq(r.string)), _r_range(r), r.u32())


def _w_tx(w: Writer, tx: MergeTxRecord) -> None:
    w.string(tx.tx_id)
    w.string(tx.coordinator)
    w.seq(tx.participants, lambda p: _w_participant(w, p))
    w.string(tx.merged_cluster_id)
    w.seq(tx.resume_members, w.string)
    w.u8(1 if tx.decision == TxDecision.OK else 2)
    w.string(tx.deciding_cluster)


def _r_tx(r: Reader) -> MergeTxRecord:
    return MergeTxRecord(
        tx_id=r.string(),
        coordinator=r.string(),
        participants=tuple(r.seq(lambda: _r_participant(r))),
        merged_cluster_id=r.string(),
        resume_members=tuple(r.seq(r.string)),
        decision=TxDecision.OK if r.u8() == 1 else TxDecision.NO,
        deciding_cluster=r.string(),
    )


_CFG_TAGS = {k: i + 1 for i, k in enumerate(ConfigKind)}
_CFG_BY_TAG = {v: k for k, v in _CFG_TAGS.items()}


def _w_config(w: Writer, c: ClusterConfig) -> None:
    w.string(c.config_id)
    w.string(c.cluster_id)
    w.seq(c.members, w.string)
    _w_range(w, c.key_range)
    w.u8(_CFG_TAGS[c.kind])
    _w_rule(w, c.election_quorum)
    _w_rule(w, c.commit_quorum)
    w.seq(c.subclusters, lambda s: _w_sub(w, s))
    w.u16(c.quorum_size)
    w.seq(c.final_members, w.string)
    w.opt(c.tx, lambda tx: _w_tx(w, tx))
    w.u32(c.epoch_new)


def _r_config(r: Reader) -> ClusterConfig:
    return ClusterConfig(
        config_id=r.string(),
        cluster_id=r.string(),
        members=tuple(r.seq(r.string)),
        key_range=_r_range(r),
        kind=_CFG_BY_TAG[r.u8()],
        election_quorum=_r_rule(r),
        commit_quorum=_r_rule(r),
        subclusters=tuple(r.seq(lambda: _r_sub(r))),
        quorum_size=r.u16(),
        final_members=tuple(r.seq(r.string)),
        tx=r.opt(lambda: _r_tx(r)),
        epoch_new=r.u32(),
    )


def _w_entry(w: Writer, e: LogEntry) -> None:
    w.u64(e.index)
    w.u64(e.at.packed())
    w.u8(e.kind.value)
    w.blob(e.command)
    w.opt(e.config, lambda c: _w_config(w, c))


def _r_entry(r: Reader) -> LogEntry:
    return LogEntry(
        index=r.u64(),
        at=EpochTerm.unpack(r.u64()),
        kind=PayloadKind(r.u8()),
        command=r.blob(),
        config=r.opt(lambda: _r_config(r)),
    )


def encode_config(c: ClusterConfig) -> bytes:
    w = Writer()
    _w_config(w, c)
    return w.take()


def decode_config(data: bytes) -> ClusterConfig:
    return _r_config(Reader(data))


def encode_entry(e: LogEntry) -> bytes:
    w = Writer()
    _w_entry(w, e)
    return w.take()


def decode_entry(data: bytes) -> LogEntry:
    return _r_entry(Reader(data))


def encode_tx(tx: MergeTxRecord) -> bytes:
    w = Writer()
    _w_tx(w, tx)
    return w.take()


def decode_tx(data: bytes) -> MergeTxRecord:
    return _r_tx(Reader(data))


# ---------------------------------------------------------------------------
# Message envelope

_MSG_TAGS: dict[type, int] = {
    m.VoteRequest: 1,
    m.VoteResponse: 2,
    m.AppendEntries: 3,
    m.AppendResponse: 4,
    m.CommitNotify: 5,
    m.PullRequest: 6,
    m.PullResponse: 7,
    m.MergePrepare: 8,
    m.MergePrepareResponse: 9,
    m.MergeCommit: 10,
    m.MergeCommitAck: 11,
    m.SnapshotRequest: 12,
    m.SnapshotChunk: 13,
    m.InstallSnapshot: 14,
}
_MSG_BY_TAG = {v: k for k, v in _MSG_TAGS.items()}


def encode_message(msg: m.Message) -> bytes:
    w = Writer()
    w.u8(WIRE_VERSION)
    w.u8(_MSG_TAGS[type(msg)])
    if isinstance(msg, m.VoteRequest):
        w.string(msg.candidate)
        w.u64(msg.at)
        w.u64(msg.last_index)
        w.u64(msg.last_at)
    elif isinstance(msg, m.VoteResponse):
        w.string(msg.voter)
        w.u64(msg.at)
        w.u8(msg.verdict.value)
    elif isinstance(msg, m.AppendEntries):
        w.string(msg.leader)
        w.u64(msg.at)
        w.u64(msg.prev_index)
        w.u64(msg.prev_at)
        w.seq(msg.entries, lambda e: _w_entry(w, e))
        w.u64(msg.leader_commit)
    elif isinstance(msg, m.AppendResponse):
        w.string(msg.follower)
        w.u64(msg.at)
        w.boolean(msg.ok)
        w.u64(msg.match_index)
        w.u64(msg.conflict_index)
    elif isinstance(msg, m.CommitNotify):
        w.string(msg.sender)
        w.string(msg.old_cluster_id)
        w.string(msg.config_id)
        w.u64(msg.commit_index)
        w.boolean(msg.is_ack)
    elif isinstance(msg, m.PullRequest):
        w.string(msg.sender)
        w.u64(msg.from_index)
        w.u32(msg.epoch)
    elif isinstance(msg, m.PullResponse):
        w.string(msg.sender)
        w.u8(msg.status.value)
        w.u64(msg.from_index)
        w.seq(msg.entries, lambda e: _w_entry(w, e))
        w.u64(msg.source_commit)
        w.blob(msg.history_blob)
        w.blob(msg.residue_blob)
    elif isinstance(msg, m.MergePrepare):
        w.string(msg.sender)
        w.string(msg.coordinator_cluster)
        w.blob(msg.tx_blob)
        w.u8(msg.ttl)
    elif isinstance(msg, m.MergePrepareResponse):
        w.string(msg.sender)
        w.string(msg.tx_id)
        w.string(msg.cluster_id)
        w.boolean(msg.ok)
        w.u32(msg.epoch)
        w.u8(msg.ttl)
    elif isinstance(msg, m.MergeCommit):
        w.string(msg.sender)
        w.string(msg.tx_id)
        _w_config(w, msg.config)
        w.u8(msg.ttl)
    elif isinstance(msg, m.MergeCommitAck):
        w.string(msg.sender)
        w.string(msg.tx_id)
        w.string(msg.cluster_id)
        w.u8(msg.ttl)
    elif isinstance(msg, m.SnapshotRequest):
        w.string(msg.sender)
        w.string(msg.tx_id)
        w.string(msg.cluster_id)
        w.u64(msg.offset)
    elif isinstance(msg, m.SnapshotChunk):
        w.string(msg.sender)
        w.string(msg.tx_id)
        w.string(msg.cluster_id)
        w.boolean(msg.ready)
        w.u64(msg.offset)
        w.u64(msg.total)
        w.blob(msg.data)
        w.u32(msg.checksum)
    elif isinstance(msg, m.InstallSnapshot):
        w.string(msg.leader)
        w.u64(msg.at)
        w.u64(msg.offset)
        w.u64(msg.total)
        w.blob(msg.data)
        w.u32(msg.checksum)
        w.boolean(msg.done)
    else:  # pragma: no cover - exhaustive above
        raise WireError(f"unknown message type {type(msg)!r}")
    return w.take()


def decode_message(data: bytes) -> m.Message:
    r = Reader(data)
    version = r.u8()
    if version != WIRE_VERSION:
        raise WireError(f"unsupported wire version {version}")
    tag = r.u8()
    cls = _MSG_BY_TAG.get(tag)
    if cls is None:
        raise WireError(f"unknown message tag {tag}")
    if cls is m.VoteRequest:
        out: m.Message = m.VoteRequest(r.string(), r.u64(), r.u64(), r.u64())
    elif cls is m.VoteResponse:
        out = m.VoteResponse(r.string(), r.u64(), m.VoteVerdict(r.u8()))
    elif cls is m.AppendEntries:
        out = m.AppendEntries(
            leader=r.string(), at=r.u64(), prev_index=r.u64(), prev_at=r.u64(),
            entries=tuple(r.seq(lambda: _r_entry(r))), leader_commit=r.u64(),
        )
    elif cls is m.AppendResponse:
        out = m.AppendResponse(r.string(), r.u64(), r.boolean(), r.u64(), r.u64())
    elif cls is m.CommitNotify:
        out = m.CommitNotify(r.string(), r.string(), r.string(), r.u64(), r.boolean())
    elif cls is m.PullRequest:
        out = m.PullRequest(r.string(), r.u64(), r.u32())
    elif cls is m.PullResponse:
        out = m.PullResponse(
            sender=r.string(), status=m.PullStatus(r.u8()), from_index=r.u64(),
            entries=tuple(r.seq(lambda: _r_entry(r))), source_commit=r.u64(),
            history_blob=r.blob(), residue_blob=r.blob(),
        )
    elif cls is m.MergePrepare:
        out = m.MergePrepare(r.string(), r.string(), r.blob(), r.u8())
    elif cls is m.MergePrepareResponse:
        out = m.MergePrepareResponse(r.string(), r.string(), r.string(),
                                     r.boolean(), r.u32(), r.u8())
    elif cls is m.MergeCommit:
        out = m.MergeCommit(r.string(), r.string(), _r_config(r), r.u8())
    elif cls is m.MergeCommitAck:
        out = m.MergeCommitAck(r.string(), r.string(), r.string(), r.u8())
    elif cls is m.SnapshotRequest:
        out = m.SnapshotRequest(r.string(), r.string(), r.string(), r.u64())
    elif cls is m.SnapshotChunk:
        out = m.SnapshotChunk(
            sender=r.string(), tx_id=r.string(), cluster_id=r.string(),
            ready=r.boolean(), offset=r.u64(), total=r.u64(), data=r.blob(),
            checksum=r.u32(),
        )
    else:
        out = m.InstallSnapshot(
            leader=r.string(), at=r.u64(), offset=r.u64(), total=r.u64(),
            data=r.blob(), checksum=r.u32(), done=r.boolean(),
        )
    if not r.done():
        raise WireError("trailing bytes after message")
    return out


# ---------------------------------------------------------------------------
# KV client protocol

KV_PUT = 1
KV_GET = 2
KV_DELETE = 3
KV_OK = 4
KV_REDIRECT = 5
KV_ERROR = 6

REDIRECT_NOT_LEADER = 1
REDIRECT_NOT_MY_RANGE = 2
REDIRECT_BUSY = 3


def encode_kv_request(op: int, key: str, value: str = "") -> bytes:
    w = Writer()
    w.u8(op)
    w.string(key)
    if op == KV_PUT:
        w.string(value)
    return _frame(w.take())


def encode_kv_ok(value: Optional[str] = None) -> bytes:
    w = Writer()
    w.u8(KV_OK)
    w.opt(value, w.string)
    return _frame(w.take())


def encode_kv_redirect(reason: int, cluster_id: str, leader_hint: str) -> bytes:
    w = Writer()
    w.u8(KV_REDIRECT)
    w.u8(reason)
    w.string(cluster_id)
    w.string(leader_hint)
    return _frame(w.take())


def encode_kv_error(code: int, message: str) -> bytes:
    w = Writer()
    w.u8(KV_ERROR)
    w.u8(code)
    w.string(message)
    return _frame(w.take())


def _frame(body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + body


def decode_kv_record(data: bytes) -> tuple[dict, bytes]:
    """Decode one length-prefixed KV record; returns (record, remainder)."""
    if len(data) < 4:
        raise WireError("short KV frame")
    (length,) = struct.unpack(">I", data[:4])
    if len(data) < 4 + length:
        raise WireError("truncated KV frame")
    body, rest = data[4:4 + length], data[4 + length:]
    r = Reader(body)
    tag = r.u8()
    rec: dict = {"op": tag}
    if tag in (KV_PUT, KV_GET, KV_DELETE):
        rec["key"] = r.string()
        if tag == KV_PUT:
            rec["value"] = r.string()
    elif tag == KV_OK:
        rec["value"] = r.opt(r.string)
    elif tag == KV_REDIRECT:
        rec["reason"] = r.u8()
        rec["cluster_id"] = r.string()
        rec["leader_hint"] = r.string()
    elif tag == KV_ERROR:
        rec["code"] = r.u8()
        rec["message"] = r.string()
    else:
        raise WireError(f"unknown KV tag {tag}")
    return rec, rest


# ---------------------------------------------------------------------------
# Snapshot blobs


def encode_snapshot(source_cluster: str, key_range: KeyRange, last_index: int,
                    last_at: int, kv: dict[str, str]) -> bytes:
    w = Writer()
    w.string(source_cluster)
    _w_range(w, key_range)
    w.u64(last_index)
    w.u64(last_at)
    w.u32(len(kv))
    for k in sorted(kv):
        w.string(k)
        w.string(kv[k])
    return w.take()


def decode_snapshot(data: bytes) -> dict:
    r = Reader(data)
    out = {
        "source_cluster": r.string(),
        "key_range": _r_range(r),
        "last_index": r.u64(),
        "last_at": r.u64(),
    }
    count = r.u32()
    kv: dict[str, str] = {}
    for _ in range(count):
        k = r.string()
        kv[k] = r.string()
    out["kv"] = kv
    return out
