"""Wire codec round-trips, layout stability, and the KV client records."""

import pytest
from hypothesis import given, strategies as st

from shardraft import messages as msg
from shardraft import wire
from shardraft.types import (
    ClusterConfig,
    EpochTerm,
    KeyRange,
    LogEntry,
    MergeTxRecord,
    Participant,
    SubCluster,
    TxDecision,
    merge_new_config,
    merge_tx_config,
    split_joint_config,
    split_new_config,
    stable_config,
)

ABC = stable_config("cfg1", "c0", ["a", "b", "c"], KeyRange.single("a", None))


def sample_joint():
    subs = (
        SubCluster("c0.1", ("a", "b"), KeyRange.single("a", "m")),
        SubCluster("c0.2", ("c",), KeyRange.single("m", None)),
    )
    return split_joint_config("cfgJ", ABC, subs)


def sample_tx():
    return MergeTxRecord(
        tx_id="c1:42:1",
        coordinator="c1",
        participants=(
            Participant("c1", ("a", "b"), KeyRange.single("a", "m"), 1),
            Participant("c2", ("c", "d"), KeyRange.single("m", None), 3),
        ),
        merged_cluster_id="c1+c2",
        resume_members=(),
        decision=TxDecision.OK,
        deciding_cluster="c1",
    )


CONFIGS = [
    ABC,
    sample_joint(),
    split_new_config("cfgN", sample_joint()),
    merge_tx_config("cfgT", ABC, sample_tx()),
    merge_new_config("cfgM", ABC, sample_tx(), epoch_new=4),
]


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: c.config_id)
def test_config_roundtrip(cfg):
    assert wire.decode_config(wire.encode_config(cfg)) == cfg


def test_entry_roundtrip():
    entries = [
        LogEntry.noop(1, EpochTerm(0, 1)),
        LogEntry.cmd(2, EpochTerm(1, 3), b"\x00\xffdata"),
        LogEntry.cfg(3, EpochTerm(2, 1), sample_joint()),
    ]
    for e in entries:
        assert wire.decode_entry(wire.encode_entry(e)) == e


MESSAGES = [
    msg.VoteRequest("a", 5, 10, 4),
    msg.VoteResponse("b", 5, msg.VoteVerdict.GRANT),
    msg.VoteResponse("b", 9, msg.VoteVerdict.PULL),
    msg.AppendEntries("a", 5, 3, 4, (LogEntry.noop(4, EpochTerm(0, 5)),), 2),
    msg.AppendResponse("c", 5, True, match_index=4),
    msg.AppendResponse("c", 5, False, conflict_index=2),
    msg.CommitNotify("a", "c0", "cfgN", 9),
    msg.CommitNotify("b", "c0", "cfgN", 9, is_ack=True),
    msg.PullRequest("f", 5),
    msg.PullResponse("a", msg.PullStatus.ENTRIES, 5,
                     (LogEntry.cmd(6, EpochTerm(0, 2), b"x"),), 9),
    msg.PullResponse("a", msg.PullStatus.NOT_READY),
    msg.PullResponse("a", msg.PullStatus.HISTORY, history_blob=b"[]",
                     residue_blob=b"\x01\x02"),
    msg.MergePrepare("a", "c1", wire.encode_tx(sample_tx())),
    msg.MergePrepareResponse("d", "c1:42:1", "c2", True, 3),
    msg.MergeCommit("a", "c1:42:1", merge_new_config("cfgM", ABC, sample_tx(), 4)),
    msg.MergeCommitAck("d", "c1:42:1", "c2"),
    msg.SnapshotRequest("a", "c1:42:1", "c2", 65536),
    msg.SnapshotChunk("d", "c1:42:1", "c2", True, 0, 10, b"0123456789", 1234),
    msg.SnapshotChunk("d", "c1:42:1", "c2", False),
    msg.InstallSnapshot("a", 5, 0, 4, b"abcd", 99, True),
]


@pytest.mark.parametrize("message", MESSAGES,
                         ids=lambda x: type(x).__name__ + "_" + str(id(x))[-4:])
def test_message_roundtrip(message):
    assert wire.decode_message(wire.encode_message(message)) == message


def test_envelope_carries_version_and_tag():
    raw = wire.encode_message(msg.PullRequest("f", 5))
    assert raw[0] == wire.WIRE_VERSION
    assert raw[1] == 6  # PullRequest's documented tag


def test_envelope_layout_is_stable():
    # Pinned bytes: changing the layout must bump WIRE_VERSION.
    raw = wire.encode_message(msg.VoteRequest("a", 5, 10, 4))
    assert raw.hex() == "01010001610000000000000005000000000000000a0000000000000004"


def test_unknown_tag_rejected():
    with pytest.raises(wire.WireError):
        wire.decode_message(bytes([wire.WIRE_VERSION, 99]))


def test_trailing_bytes_rejected():
    raw = wire.encode_message(msg.PullRequest("f", 5)) + b"\x00"
    with pytest.raises(wire.WireError):
        wire.decode_message(raw)


def test_wrong_version_rejected():
    raw = bytearray(wire.encode_message(msg.PullRequest("f", 5)))
    raw[0] = 2
    with pytest.raises(wire.WireError):
        wire.decode_message(bytes(raw))


@given(st.dictionaries(st.text(max_size=8), st.text(max_size=16), max_size=20),
       st.integers(0, 100), st.integers(0, 2**63))
def test_snapshot_roundtrip(kv, last_index, last_at):
    blob = wire.encode_snapshot("c0", KeyRange.single("", None), last_index,
                                last_at, kv)
    snap = wire.decode_snapshot(blob)
    assert snap["kv"] == kv
    assert snap["last_index"] == last_index
    assert snap["source_cluster"] == "c0"


def test_kv_records():
    raw = wire.encode_kv_request(wire.KV_PUT, "k", "v")
    rec, rest = wire.decode_kv_record(raw)
    assert rec == {"op": wire.KV_PUT, "key": "k", "value": "v"}
    assert rest == b""

    rec, _ = wire.decode_kv_record(wire.encode_kv_ok("hello"))
    assert rec == {"op": wire.KV_OK, "value": "hello"}
    rec, _ = wire.decode_kv_record(wire.encode_kv_ok(None))
    assert rec == {"op": wire.KV_OK, "value": None}

    rec, _ = wire.decode_kv_record(
        wire.encode_kv_redirect(wire.REDIRECT_NOT_LEADER, "c0", "n2"))
    assert rec["reason"] == wire.REDIRECT_NOT_LEADER
    assert rec["leader_hint"] == "n2"

    rec, _ = wire.decode_kv_record(wire.encode_kv_error(7, "nope"))
    assert rec == {"op": wire.KV_ERROR, "code": 7, "message": "nope"}


def test_kv_records_stream():
    stream = wire.encode_kv_request(wire.KV_GET, "a") + \
        wire.encode_kv_request(wire.KV_DELETE, "b")
    rec1, rest = wire.decode_kv_record(stream)
    rec2, rest = wire.decode_kv_record(rest)
    assert rec1["key"] == "a" and rec2["key"] == "b"
    assert rest == b""


def test_truncated_kv_frame():
    raw = wire.encode_kv_request(wire.KV_GET, "a")
    with pytest.raises(wire.WireError):
        wire.decode_kv_record(raw[:-1])
