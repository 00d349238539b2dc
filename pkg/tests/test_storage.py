"""Durable-state replay: record framing, torn tails, CRC checks, resets,
and the snapshot file format."""

import struct
import zlib

import pytest

from shardraft import wire
from shardraft.storage import (
    FileStore,
    MemoryStore,
    StorageError,
    read_snapshot_file,
    write_snapshot_file,
)
from shardraft.types import EpochTerm, KeyRange, LogEntry


def entry(i, term=1, data=b"x"):
    return LogEntry.cmd(i, EpochTerm(0, term), data)


@pytest.fixture(params=["memory", "file"])
def store(request, tmp_path):
    if request.param == "memory":
        return MemoryStore()
    return FileStore(str(tmp_path / "node"))


def test_entry_replay(store):
    for i in range(1, 6):
        store.persist_entry(entry(i))
    store.persist_meta(EpochTerm(0, 3), "n2")
    state = store.recover()
    assert [e.index for e in state.entries] == [1, 2, 3, 4, 5]
    assert state.current == EpochTerm(0, 3)
    assert state.voted_for == "n2"


def test_truncate_replay(store):
    for i in range(1, 6):
        store.persist_entry(entry(i))
    store.persist_truncate(3)
    store.persist_entry(entry(3, term=2))
    state = store.recover()
    assert [e.index for e in state.entries] == [1, 2, 3]
    assert state.entries[-1].at == EpochTerm(0, 2)


def test_meta_last_writer_wins(store):
    store.persist_meta(EpochTerm(0, 1), "a")
    store.persist_meta(EpochTerm(2, 0), None)
    state = store.recover()
    assert state.current == EpochTerm(2, 0)
    assert state.voted_for is None


def test_reset_replay(store):
    for i in range(1, 4):
        store.persist_entry(entry(i))
    blob = wire.encode_snapshot("c0+c1", KeyRange.single("a", None), 0, 0,
                                {"k": "v"})
    store.persist_reset(blob)
    store.persist_entry(LogEntry.noop(1, EpochTerm(3, 0)))
    state = store.recover()
    assert state.base_snapshot is not None
    assert state.base_snapshot["kv"] == {"k": "v"}
    assert [e.index for e in state.entries] == [1]
    assert state.entries[0].at == EpochTerm(3, 0)


def test_residue_storage(store):
    blob = wire.encode_snapshot("c0", KeyRange.single("m", None), 7, 1, {"x": "1"})
    store.save_residue("cfg9", blob)
    assert store.load_residue("cfg9") == blob
    assert store.load_residue("other") is None
    state = store.recover()
    assert "cfg9" in state.residues


def test_history_roundtrip(store):
    records = [{"kind": "split", "config_id": "c", "epoch": 1, "from": [],
                "to": [], "involved": ["a"], "completed": {"a": True},
                "tx_id": ""}]
    store.save_history(records)
    assert store.load_history() == records


def test_torn_tail_dropped(tmp_path):
    store = FileStore(str(tmp_path / "node"))
    store.persist_entry(entry(1))
    store.persist_entry(entry(2))
    log_path = store._log_path
    store.close()
    with open(log_path, "ab") as fh:
        fh.write(b"\x00\x00\x00\x10partial")  # torn record at the tail
    reopened = FileStore(str(tmp_path / "node"))
    state = reopened.recover()
    assert [e.index for e in state.entries] == [1, 2]


def test_mid_stream_corruption_raises(tmp_path):
    store = FileStore(str(tmp_path / "node"))
    store.persist_entry(entry(1))
    store.persist_entry(entry(2))
    log_path = store._log_path
    store.close()
    data = bytearray(open(log_path, "rb").read())
    data[6] ^= 0xFF  # flip a byte inside the first record's payload
    with open(log_path, "wb") as fh:
        fh.write(data)
    reopened = FileStore(str(tmp_path / "node"))
    with pytest.raises(StorageError):
        reopened.recover()


def test_snapshot_file_format(tmp_path):
    blob = wire.encode_snapshot("c2", KeyRange.single("a", "m"), 9, 42,
                                {"a": "1", "b": "2"})
    path = str(tmp_path / "state.snap")
    write_snapshot_file(path, blob)
    assert read_snapshot_file(path) == blob
    raw = open(path, "rb").read()
    assert raw.startswith(b"SRSNAP01")
    # Header advertises the record count and a CRC of the records region.
    (hlen,) = struct.unpack(">I", raw[8:12])
    header = wire.Reader(raw[12:12 + hlen])
    assert header.string() == "c2"
    assert header.u64() == 9
    assert header.u64() == 42
    assert header.u32() == 2
    assert header.u32() == zlib.crc32(blob)


def test_snapshot_file_checksum_enforced(tmp_path):
    blob = wire.encode_snapshot("c2", KeyRange.single("a", None), 1, 1, {"k": "v"})
    path = str(tmp_path / "bad.snap")
    write_snapshot_file(path, blob)
    data = bytearray(open(path, "rb").read())
    data[-1] ^= 0xFF
    with open(path, "wb") as fh:
        fh.write(data)
    with pytest.raises(StorageError):
        read_snapshot_file(path)
