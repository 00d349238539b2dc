"""Per-node durable state.

Two record streams with the same framing (``u32 length | payload |
u32 crc32(payload)``):

* the log stream: ENTRY / TRUNCATE / RESET records, replayed in order to
  rebuild the suffix of the replicated log this node holds;
* the meta stream: the latest (packed epoch+term, voted_for) pair, where
  the last intact record wins.

Snapshot files follow the transfer format: a header (source cluster, key
range, last included index and stamp, record count, crc32 of the records
region) followed by sorted key/value records.  ``MemoryStore`` keeps the
same record streams in RAM so the simulator can model crash/restart with
exactly the recovery path the file store uses.

A torn final record (partial write, bad CRC) is dropped on replay;
anything corrupt earlier in the stream raises.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Optional

from . import wire
from .types import EpochTerm, LogEntry, NodeId

REC_ENTRY = 0x01
REC_TRUNCATE = 0x02
REC_RESET = 0x03
REC_META = 0x10


class StorageError(RuntimeError):
    pass


def _frame(payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + payload + struct.pack(">I", zlib.crc32(payload))


def _iter_records(data: bytes, label: str) -> Iterator[bytes]:
    pos = 0
    n = len(data)
    while pos < n:
        if pos + 4 > n:
            return  # torn length prefix at tail
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        end = pos + 4 + length + 4
        if end > n:
            return  # torn record at tail
        payload = data[pos + 4:pos + 4 + length]
        (crc,) = struct.unpack(">I", data[end - 4:end])
        if zlib.crc32(payload) != crc:
            if end == n:
                return  # torn final record
            raise StorageError(f"CRC mismatch mid-stream in {label}")
        yield payload
        pos = end


def encode_entry_record(e: LogEntry) -> bytes:
    return _frame(bytes([REC_ENTRY]) + wire.encode_entry(e))


def encode_truncate_record(from_index: int) -> bytes:
    return _frame(bytes([REC_TRUNCATE]) + struct.pack(">Q", from_index))


def encode_reset_record() -> bytes:
    # The reset refers to the "base" snapshot saved immediately before it;
    # entries after the base are appended as ordinary ENTRY records.
    return _frame(bytes([REC_RESET]))


def encode_meta_record(current: EpochTerm, voted_for: Optional[NodeId]) -> bytes:
    w = wire.Writer()
    w.u8(REC_META)
    w.u64(current.packed())
    w.opt(voted_for, w.string)
    return _frame(w.take())


@dataclass
class RecoveredState:
    current: EpochTerm
    voted_for: Optional[NodeId]
    entries: list[LogEntry]
    base_snapshot: Optional[dict]  # decoded snapshot blob installed as log base
    history: list[dict]
    residues: dict[str, bytes]  # split config_id -> encoded out-of-range state


class Store:
    """Abstract durable store; both backends share replay logic."""

    def append_log(self, record: bytes) -> None:
        raise NotImplementedError

    def append_meta(self, record: bytes) -> None:
        raise NotImplementedError

    def log_bytes(self) -> bytes:
        raise NotImplementedError

    def meta_bytes(self) -> bytes:
        raise NotImplementedError

    def save_snapshot(self, name: str, blob: bytes) -> None:
        raise NotImplementedError

    def load_snapshot(self, name: str) -> Optional[bytes]:
        raise NotImplementedError

    def save_history(self, records: list[dict]) -> None:
        raise NotImplementedError

    def load_history(self) -> list[dict]:
        raise NotImplementedError

    # -- shared helpers ----------------------------------------------------

    def persist_entry(self, e: LogEntry) -> None:
        self.append_log(encode_entry_record(e))

    def persist_truncate(self, from_index: int) -> None:
        self.append_log(encode_truncate_record(from_index))

    def persist_reset(self, base_blob: bytes) -> None:
        # The snapshot must land before the reset record that references it.
        self.save_snapshot("base", base_blob)
        self.append_log(encode_reset_record())

    def persist_meta(self, current: EpochTerm, voted_for: Optional[NodeId]) -> None:
        self.append_meta(encode_meta_record(current, voted_for))

    def save_residue(self, split_config_id: str, blob: bytes) -> None:
        self.save_snapshot(f"residue-{split_config_id}", blob)

    def load_residue(self, split_config_id: str) -> Optional[bytes]:
        return self.load_snapshot(f"residue-{split_config_id}")

    def recover(self) -> RecoveredState:
        entries: list[LogEntry] = []
        base: Optional[dict] = None
        for payload in _iter_records(self.log_bytes(), "log"):
            tag = payload[0]
            body = payload[1:]
            if tag == REC_ENTRY:
                e = wire.decode_entry(body)
                if entries and e.index != entries[-1].index + 1:
                    raise StorageError(
                        f"log gap: {entries[-1].index} then {e.index}")
                entries.append(e)
            elif tag == REC_TRUNCATE:
                (from_index,) = struct.unpack(">Q", body)
                entries = [e for e in entries if e.index < from_index]
            elif tag == REC_RESET:
                blob = self.load_snapshot("base")
                if blob is None:
                    raise StorageError("log reset without a base snapshot")
                base = wire.decode_snapshot(blob)
                entries = []
            else:
                raise StorageError(f"unknown log record tag {tag}")
        current = EpochTerm(0, 0)
        voted: Optional[NodeId] = None
        for payload in _iter_records(self.meta_bytes(), "meta"):
            if payload[0] != REC_META:
                raise StorageError(f"unknown meta record tag {payload[0]}")
            r = wire.Reader(payload[1:])
            current = EpochTerm.unpack(r.u64())
            voted = r.opt(r.string)
        residues = {}
        for name, blob in self._iter_snapshots():
            if name.startswith("residue-"):
                residues[name[len("residue-"):]] = blob
        return RecoveredState(
            current=current, voted_for=voted, entries=entries,
            base_snapshot=base, history=self.load_history(), residues=residues,
        )

    def _iter_snapshots(self) -> Iterator[tuple[str, bytes]]:
        raise NotImplementedError


class MemoryStore(Store):
    """In-memory durable state; survives simulated crashes, not process exit."""

    def __init__(self) -> None:
        self._log = bytearray()
        self._meta = bytearray()
        self._snaps: dict[str, bytes] = {}
        self._history: list[dict] = []

    def append_log(self, record: bytes) -> None:
        self._log.extend(record)

    def append_meta(self, record: bytes) -> None:
        self._meta.extend(record)

    def log_bytes(self) -> bytes:
        return bytes(self._log)

    def meta_bytes(self) -> bytes:
        return bytes(self._meta)

    def save_snapshot(self, name: str, blob: bytes) -> None:
        self._snaps[name] = blob

    def load_snapshot(self, name: str) -> Optional[bytes]:
        return self._snaps.get(name)

    def save_history(self, records: list[dict]) -> None:
        self._history = [dict(x) for x in records]

    def load_history(self) -> list[dict]:
        return [dict(x) for x in self._history]

    def _iter_snapshots(self) -> Iterator[tuple[str, bytes]]:
        for name in sorted(self._snaps):
            yield name, self._snaps[name]


SNAPSHOT_MAGIC = b"SRSNAP01"


def write_snapshot_file(path: str, blob: bytes) -> None:
    """Persist a snapshot with the documented header + sorted records."""
    snap = wire.decode_snapshot(blob)  # validates, and yields header fields
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        hdr = wire.Writer()
        hdr.string(snap["source_cluster"])
        hdr.u64(snap["last_index"])
        hdr.u64(snap["last_at"])
        hdr.u32(len(snap["kv"]))
        hdr.u32(zlib.crc32(blob))
        body = hdr.take()
        fh.write(struct.pack(">I", len(body)))
        fh.write(body)
        fh.write(blob)
    os.replace(tmp, path)


def read_snapshot_file(path: str) -> bytes:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != SNAPSHOT_MAGIC:
        raise StorageError("not a snapshot file")
    (hlen,) = struct.unpack(">I", data[8:12])
    header = wire.Reader(data[12:12 + hlen])
    header.string()
    header.u64()
    header.u64()
    header.u32()
    crc = header.u32()
    blob = data[12 + hlen:]
    if zlib.crc32(blob) != crc:
        raise StorageError("snapshot checksum mismatch")
    return blob


class FileStore(Store):
    """Directory-backed store: log/meta record files, snapshot files, and a
    JSON-lines history file."""

    def __init__(self, directory: str) -> None:
        self.dir = directory
        os.makedirs(directory, exist_ok=True)
        self._log_path = os.path.join(directory, "log.rec")
        self._meta_path = os.path.join(directory, "meta.rec")
        self._hist_path = os.path.join(directory, "history.jsonl")
        self._log_fh = open(self._log_path, "ab")
        self._meta_fh = open(self._meta_path, "ab")

    def close(self) -> None:
        self._log_fh.close()
        self._meta_fh.close()

    def append_log(self, record: bytes) -> None:
        self._log_fh.write(record)
        self._log_fh.flush()

    def append_meta(self, record: bytes) -> None:
        self._meta_fh.write(record)
        self._meta_fh.flush()

    def log_bytes(self) -> bytes:
        self._log_fh.flush()
        with open(self._log_path, "rb") as fh:
            return fh.read()

    def meta_bytes(self) -> bytes:
        self._meta_fh.flush()
        with open(self._meta_path, "rb") as fh:
            return fh.read()

    def _snap_path(self, name: str) -> str:
        return os.path.join(self.dir, f"{name}.snap")

    def save_snapshot(self, name: str, blob: bytes) -> None:
        write_snapshot_file(self._snap_path(name), blob)

    def load_snapshot(self, name: str) -> Optional[bytes]:
        path = self._snap_path(name)
        if not os.path.exists(path):
            return None
        return read_snapshot_file(path)

    def save_history(self, records: list[dict]) -> None:
        tmp = self._hist_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        os.replace(tmp, self._hist_path)

    def load_history(self) -> list[dict]:
        if not os.path.exists(self._hist_path):
            return []
        out = []
        with open(self._hist_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out

    def _iter_snapshots(self) -> Iterator[tuple[str, bytes]]:
        for fname in sorted(os.listdir(self.dir)):
            if fname.endswith(".snap"):
                name = fname[:-5]
                blob = self.load_snapshot(name)
                if blob is not None:
                    yield name, blob
