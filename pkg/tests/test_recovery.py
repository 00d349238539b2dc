"""Recovery machinery: history records and GC, the naming registry, node
restarts, and whole-cluster restoration after peers compacted away."""

import pytest

from shardraft import kvstore
from shardraft.recovery import HistoryRecord, NamingRegistry, ReconfigHistory
from shardraft.simnet.oracles import check_liveness, check_safety
from shardraft.simnet.scenario import scenario_from_obj
from shardraft.simnet.sim import run_scenario
from shardraft.types import KeyRange

from harness import Net


def record(config_id="cfgX", involved=("a", "b"), completed=("a",)):
    return HistoryRecord(
        kind="split", config_id=config_id, epoch=1,
        from_clusters=[{"cluster_id": "c0", "members": list(involved),
                        "range": [["", None]]}],
        to_clusters=[{"cluster_id": "c0.1", "members": list(involved),
                      "range": [["", None]]}],
        involved=list(involved),
        completed={n: True for n in completed},
    )


def test_history_gc_waits_for_everyone():
    hist = ReconfigHistory()
    hist.add(record(completed=("a",)))
    assert hist.gc() == []
    assert hist.records
    hist.mark_complete("cfgX", "b")
    removed = hist.gc()
    assert [r.config_id for r in removed] == ["cfgX"]
    assert not hist.records


def test_history_add_merges_completion():
    hist = ReconfigHistory()
    hist.add(record(completed=("a",)))
    hist.add(record(completed=("b",)))
    assert len(hist.records) == 1
    assert hist.records[0].completed == {"a": True, "b": True}


def test_history_roundtrip_encoding():
    hist = ReconfigHistory([record()])
    again = ReconfigHistory.decode(hist.encode())
    assert again.to_objs() == hist.to_objs()


def test_naming_upsert_and_lookup():
    reg = NamingRegistry()
    reg.register("c0", ["a", "b"], KeyRange.single("", None), 0)
    reg.register("c0.1", ["a"], KeyRange.single("", "m"), 1)
    reg.register("c0.2", ["b"], KeyRange.single("m", None), 1)
    hits = reg.lookup_range(KeyRange.single("", None))
    assert [e.cluster_id for e in hits] == ["c0", "c0.1", "c0.2"]
    hits = reg.lookup_range(KeyRange.single("q", "r"))
    assert {e.cluster_id for e in hits} == {"c0", "c0.2"}


def test_naming_ignores_stale_writer():
    reg = NamingRegistry()
    reg.register("c0", ["a", "b", "c"], KeyRange.single("", None), 3)
    reg.register("c0", ["x"], KeyRange.single("", None), 1)
    assert reg.get("c0").members == ("a", "b", "c")


def test_naming_never_fabricates():
    reg = NamingRegistry()
    assert reg.get("ghost") is None
    assert reg.lookup_range(KeyRange.single("", None)) == []


def test_restarted_node_rejoins_and_catches_up():
    net = Net({"c0": ["a", "b", "c"]})
    leader = net.elect("a")
    for i in range(5):
        leader.propose_command(kvstore.encode_command(kvstore.CMD_PUT, f"k{i}", "v"))
    net.settle(5)
    net.crash("b")
    for i in range(5, 8):
        leader.propose_command(kvstore.encode_command(kvstore.CMD_PUT, f"k{i}", "v"))
    net.settle(5)
    node = net.restart("b")
    assert node.current.term >= 1  # durable meta survived
    assert node.commit_index == 0  # volatile commit forgotten
    net.settle(8)
    assert node.commit_index == leader.commit_index
    assert node.kv == leader.kv


def test_restart_preserves_vote():
    net = Net({"c0": ["a", "b", "c"]})
    a, b = net.nodes["a"], net.nodes["b"]
    a.start_election()
    net.pump()
    assert b.voted_for == "a"
    restarted = net.restart("b")
    assert restarted.voted_for == "a"
    assert restarted.current == a.current


def test_cluster_restore_after_peers_merged_away():
    """A subcluster that misses the completion recovers from history and
    residue even after its peers merged and compacted the shared log."""
    scn = scenario_from_obj({
        "name": "restore-after-gc",
        "horizon_ms": 26000,
        "clusters": [{"id": "c0", "nodes": ["n1", "n2", "n3", "n4", "n5", "n6"],
                      "range": ["", None]}],
        "workload": [
            {"at_ms": 700, "op": "put", "key": "a1", "value": "left"},
            {"at_ms": 800, "op": "put", "key": "t1", "value": "stranded"},
            {"at_ms": 2000, "op": "split", "cluster": "c0", "subclusters": [
                {"id": "c0.1", "nodes": ["n1", "n2"], "range": ["", "h"]},
                {"id": "c0.2", "nodes": ["n3", "n4"], "range": ["h", "s"]},
                {"id": "c0.3", "nodes": ["n5", "n6"], "range": ["s", None]}]},
            {"at_ms": 6000, "op": "merge", "clusters": ["c0.1", "c0.2"],
             "coordinator": "c0.1"},
        ],
        "faults": [
            {"kind": "partition", "from_ms": 2100, "to_ms": 16000,
             "groups": [["n5", "n6"], ["n1", "n2", "n3", "n4"]]},
        ],
        "liveness": {"heal_ms": 16000, "bound_ms": 9000},
    })
    trace = run_scenario(scn, seed=11)
    assert check_safety(trace) == []
    assert check_liveness(trace, scn) == []
    stranded = {n: trace.final_states[n] for n in ("n5", "n6")}
    for n, st in stranded.items():
        assert st["cluster"] == "c0.3", (n, st["cluster"])
        assert st["epoch"] == 1
        assert st["kv"] == {"t1": "stranded"}
    merged = trace.final_states["n1"]
    assert merged["cluster"] == "c0.1+c0.2"
    assert merged["kv"]["a1"] == "left"
    assert "t1" not in merged["kv"]


def test_pull_history_response_carries_residue():
    """The merged node's answer to an old-era pull includes the stranded
    range's state at the cut."""
    scn = scenario_from_obj({
        "name": "residue-served",
        "horizon_ms": 26000,
        "clusters": [{"id": "c0", "nodes": ["n1", "n2", "n3", "n4", "n5", "n6"],
                      "range": ["", None]}],
        "workload": [
            {"at_ms": 700, "op": "put", "key": "t1", "value": "stranded"},
            {"at_ms": 2000, "op": "split", "cluster": "c0", "subclusters": [
                {"id": "c0.1", "nodes": ["n1", "n2"], "range": ["", "h"]},
                {"id": "c0.2", "nodes": ["n3", "n4"], "range": ["h", "s"]},
                {"id": "c0.3", "nodes": ["n5", "n6"], "range": ["s", None]}]},
            {"at_ms": 6000, "op": "merge", "clusters": ["c0.1", "c0.2"],
             "coordinator": "c0.2"},
        ],
        "faults": [
            {"kind": "partition", "from_ms": 2100, "to_ms": 16000,
             "groups": [["n5", "n6"], ["n1", "n2", "n3", "n4"]]},
        ],
    })
    trace = run_scenario(scn, seed=5)
    served = [e for e in trace.of_kind("pull_served")
              if e.data.get("mode") == "history"]
    assert served, "expected a history-mode pull response"
    restores = [e for e in trace.of_kind("split_new_committed")
                if e.data.get("via") == "history_restore"]
    assert restores, "expected a history-based restore"
