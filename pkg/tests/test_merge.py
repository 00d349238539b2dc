"""Merge: the cluster-level two-phase commit, its abort and recovery
paths, snapshot exchange, and the resumption of the merged cluster."""

import pytest

from shardraft import kvstore, messages as m, wire
from shardraft.merge import (
    SnapshotXfer,
    build_tx,
    chunk_of,
    epoch_for_merge,
    merged_cluster_id,
    union_snapshots,
    with_decision,
)
from shardraft.node import Role
from shardraft.types import ConfigError, ConfigKind, KeyRange, Participant

from harness import Net

RANGES = {"c1": KeyRange.single("", "m"), "c2": KeyRange.single("m", None)}


def two_clusters(defects=frozenset()):
    net = Net({"c1": ["a", "b", "c"], "c2": ["d", "e", "f"]},
              ranges=RANGES, defects=defects)
    left = net.elect("a")
    right = net.elect("d")
    net.settle(3)
    return net, left, right


def put(leader, key, value):
    ok, why = leader.propose_command(kvstore.encode_command(kvstore.CMD_PUT, key, value))
    assert ok, why


def test_merge_two_clusters_end_to_end():
    net, left, right = two_clusters()
    put(left, "apple", "1")
    put(right, "tiger", "2")
    net.settle(4)
    ok, why = left.start_merge(["c1", "c2"], [])
    assert ok, why
    net.settle(30)
    for node in net.nodes.values():
        assert node.cluster_id == "c1+c2", (node.id, node.cluster_id)
        assert node.kv == {"apple": "1", "tiger": "2"}
        assert node.cluster_epoch == 1
        assert node.commit_index >= 1
    # The merged log restarts with the merge config as its first entry.
    first = net.nodes["a"].entry_at(1)
    assert first.config.kind == ConfigKind.MERGE_NEW
    assert first.at.epoch == 1 and first.at.term == 0
    assert net.leader_of("c1+c2") is not None


def test_merged_epoch_exceeds_all_participants():
    # Raise c2 to epoch 2 via two splits-and-merges? Simpler: stamp epochs
    # directly through the analytic helper.
    assert epoch_for_merge([1, 3]) == 4
    assert epoch_for_merge([0, 0]) == 1


def test_merge_prepare_rejected_mid_reconfiguration():
    net, left, right = two_clusters()
    # Give the participant an in-flight membership change: its vote is NO.
    ok, _ = right.admin_member_change(["g"], [])
    assert ok
    assert right._uncommitted_config_present()
    tx = build_tx("c1:9:1", "c1", [
        Participant("c1", ("a", "b", "c"), RANGES["c1"], 0),
        Participant("c2", ("d", "e", "f"), RANGES["c2"], 0),
    ])
    right.on_message(m.MergePrepare(sender="a", coordinator_cluster="c1",
                                    tx_blob=wire.encode_tx(tx)), net.now)
    net.settle(5)
    votes = [msg for _, msg in net.client_replies if False]
    decisions = [d for (_, k, d) in net.events if k == "tx_decided"
                 and d["cluster"] == "c2"]
    assert decisions and decisions[0]["decision"] == "no"


def test_merge_abort_leaves_clusters_untouched():
    net, left, right = two_clusters()
    put(left, "apple", "1")
    net.settle(3)
    # Both sides coordinate a merge at once; each sees the other's open
    # transaction at prepare time, votes NO, and both transactions abort.
    ok, why = left.start_merge(["c1", "c2"], [])
    assert ok, why
    ok, why = right.start_merge(["c1", "c2"], [])
    assert ok, why
    net.settle(25)
    aborted = {d["tx_id"] for (_, k, d) in net.events if k == "tx_aborted"}
    assert aborted, "crossing merges should have aborted"
    resolutions = {d.get("cfg_kind") for (_, k, d) in net.events
                   if k == "append" and d.get("cfg_kind") in
                   ("merge_new", "merge_abort")}
    assert resolutions == {"merge_abort"}
    # Service resumes untouched under the original configurations.
    assert left.cluster_id == "c1" and left.is_leader()
    assert right.cluster_id == "c2" and right.is_leader()
    put(left, "pear", "2")
    net.settle(8)
    assert net.nodes["b"].kv.get("pear") == "2"


def test_duplicate_prepare_answered_from_log():
    net, left, right = two_clusters()
    tx = build_tx("c1:9:7", "c1", [
        Participant("c1", ("a", "b", "c"), RANGES["c1"], 0),
        Participant("c2", ("d", "e", "f"), RANGES["c2"], 0),
    ])
    blob = wire.encode_tx(tx)
    right.on_message(m.MergePrepare(sender="a", coordinator_cluster="c1",
                                    tx_blob=blob), net.now)
    net.settle(5)
    tx_entries = [d for (_, k, d) in net.events
                  if k == "append" and d.get("cfg_kind") == "merge_tx"
                  and d.get("decider") == "c2"]
    count_after_first = len(tx_entries)
    right.on_message(m.MergePrepare(sender="a", coordinator_cluster="c1",
                                    tx_blob=blob), net.now)
    net.settle(3)
    tx_entries = [d for (_, k, d) in net.events
                  if k == "append" and d.get("cfg_kind") == "merge_tx"
                  and d.get("decider") == "c2"]
    assert len(tx_entries) == count_after_first  # no second decision entry


def test_coordinator_leader_crash_resumes_by_tx_id():
    net, left, right = two_clusters()
    put(left, "apple", "1")
    put(right, "tiger", "2")
    net.settle(3)
    ok, _ = left.start_merge(["c1", "c2"], [])
    assert ok
    net.pump()  # the local decision entry replicates; prepares go out
    net.crash("a")
    net.settle(40)
    merged = [n for n, node in net.nodes.items()
              if node.cluster_id == "c1+c2" and n not in net.down]
    assert len(merged) == 5, merged
    states = {tuple(sorted(net.nodes[n].kv.items())) for n in merged}
    assert states == {(("apple", "1"), ("tiger", "2"))}
    resolutions = {}
    for (_, k, d) in net.events:
        if k == "append" and d.get("cfg_kind") in ("merge_new", "merge_abort"):
            resolutions.setdefault(d["tx_id"], set()).add(d["cfg_kind"])
    for tx_id, kinds in resolutions.items():
        assert len(kinds) == 1, (tx_id, kinds)


def test_resume_members_resize_during_merge():
    net, left, right = two_clusters()
    put(left, "apple", "1")
    put(right, "tiger", "2")
    net.settle(3)
    ok, why = left.start_merge(["c1", "c2"], ["d", "e", "f"])
    assert ok, why
    net.settle(30)
    resumed = {n for n, node in net.nodes.items()
               if node.cluster_id == "c1+c2" and node.role != Role.RETIRED}
    retired = {n for n, node in net.nodes.items()
               if node.role == Role.RETIRED}
    assert resumed == {"d", "e", "f"}
    assert retired == {"a", "b", "c"}
    for n in resumed:
        assert net.nodes[n].kv == {"apple": "1", "tiger": "2"}
    assert net.leader_of("c1+c2").id in resumed


def test_resume_members_must_cover_a_subcluster():
    with pytest.raises(ConfigError):
        build_tx("t:1:1", "c1", [
            Participant("c1", ("a", "b", "c"), RANGES["c1"], 0),
            Participant("c2", ("d", "e", "f"), RANGES["c2"], 0),
        ], resume_members=["a", "d"])


def test_merge_requires_disjoint_ranges():
    from shardraft.types import merge_tx_config, stable_config
    overlap = build_tx("t:1:2", "c1", [
        Participant("c1", ("a", "b"), KeyRange.single("", "x"), 0),
        Participant("c2", ("c", "d"), KeyRange.single("m", None), 0),
    ])
    base = stable_config("b", "c1", ["a", "b"], KeyRange.single("", "x"))
    with pytest.raises(ConfigError):
        merge_tx_config("x", base, overlap)


def test_client_traffic_flows_during_tx_window():
    net, left, right = two_clusters()
    ok, _ = left.start_merge(["c1", "c2"], [])
    assert ok
    net.pump()  # decision committed, commit phase not yet done
    open_txs = left._open_txs()
    if open_txs:
        ok, why = left.propose_command(
            kvstore.encode_command(kvstore.CMD_PUT, "during", "tx"))
        assert ok, why


def test_snapshot_blob_roundtrip_chunked():
    kv = {f"key{i:03}": "v" * 50 for i in range(200)}
    blob = wire.encode_snapshot("c1", KeyRange.single("", "m"), 9, 5, kv)
    xfer = SnapshotXfer()
    offset = 0
    while True:
        data, total, checksum = chunk_of(blob, offset, 1024)
        xfer.add(offset, data, total, checksum)
        offset += len(data)
        if offset >= total:
            break
    assert xfer.complete() == blob
    assert offset > 1024  # actually exercised chunking


def test_union_snapshots_rejects_overlap():
    a = wire.encode_snapshot("c1", KeyRange.single("", "m"), 1, 1, {"k": "1"})
    b = wire.encode_snapshot("c2", KeyRange.single("m", None), 1, 1, {"k": "2"})
    with pytest.raises(ConfigError):
        union_snapshots([a, b])


def test_union_snapshots_merges_ranges():
    a = wire.encode_snapshot("c1", KeyRange.single("", "m"), 1, 1, {"a": "1"})
    b = wire.encode_snapshot("c2", KeyRange.single("m", None), 1, 1, {"z": "2"})
    kv, merged = union_snapshots([a, b])
    assert kv == {"a": "1", "z": "2"}
    assert merged == KeyRange.single("", None)


def test_merged_cluster_id_is_sorted_join():
    assert merged_cluster_id(["c2", "c1"]) == "c1+c2"
