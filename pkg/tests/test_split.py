"""Two-phase split: entering joint mode, leaving it, commit notification,
the epoch bump, and pull-based recovery of missed nodes and subclusters."""

import pytest

from shardraft import messages as m
from shardraft.node import Role
from shardraft.split import parse_split_spec
from shardraft.types import ConfigError, ConfigKind, KeyRange, SubCluster

from harness import Net

SUBS = [
    SubCluster("c0.1", ("a", "b", "c"), KeyRange.single("", "m")),
    SubCluster("c0.2", ("d", "e", "f"), KeyRange.single("m", None)),
]


def six_net(defects=frozenset()):
    return Net({"c0": ["a", "b", "c", "d", "e", "f"]}, defects=defects)


def test_enter_joint_applies_election_rule_wait_free():
    net = six_net()
    leader = net.elect("a")
    ok, _ = leader.admin_split(list(SUBS))
    assert ok
    # Wait-free: the joint election rule is active before any ack.
    assert leader.election_rule.kind.name == "JOINT_ALL"
    assert leader.commit_rule.describe() == "majority(4/6)"


def test_enter_joint_requires_partition():
    net = six_net()
    leader = net.elect("a")
    bad = [SubCluster("x", ("a", "b"), KeyRange.single("", "m")),
           SubCluster("y", ("c", "d"), KeyRange.single("m", None))]
    ok, why = leader.admin_split(bad)
    assert not ok and "partition" in why


def test_enter_joint_blocked_by_pending_config():
    net = six_net()
    leader = net.elect("a")
    ok, _ = leader.admin_member_change(["g"], [])
    assert ok
    ok, why = leader.admin_split(list(SUBS))
    assert not ok and why == "P1"


def test_full_split_commits_two_entries_and_bumps_epoch():
    net = six_net()
    leader = net.elect("a")
    assert leader.admin_split(list(SUBS))[0]
    net.settle()
    for node in net.nodes.values():
        assert node.cluster_epoch == 1, node.id
        assert node.cluster_id in ("c0.1", "c0.2")
    cfg_appends = [d for (_, k, d) in net.events
                   if k == "append" and d.get("cfg_kind")]
    by_kind = {d["cfg_kind"] for d in cfg_appends}
    assert by_kind == {"split_joint", "split_new"}
    # One joint and one completion entry each, observed by every node.
    assert len([d for d in cfg_appends if d["cfg_kind"] == "split_joint"]) == 6
    assert len([d for d in cfg_appends if d["cfg_kind"] == "split_new"]) == 6


def test_split_cuts_state_by_range():
    from shardraft import kvstore
    net = six_net()
    leader = net.elect("a")
    for key, val in (("apple", "1"), ("tiger", "2")):
        leader.propose_command(kvstore.encode_command(kvstore.CMD_PUT, key, val))
    net.settle(5)
    assert leader.admin_split(list(SUBS))[0]
    net.settle()
    assert net.nodes["a"].kv == {"apple": "1"}
    assert net.nodes["d"].kv == {"tiger": "2"}
    # The out-of-range half is parked durably for late restorers.
    residues = [name for name, _ in net.stores["a"]._iter_snapshots()
                if name.startswith("residue-")]
    assert residues


def test_leader_carries_into_own_subcluster():
    net = six_net()
    leader = net.elect("a")
    assert leader.admin_split(list(SUBS))[0]
    net.settle()
    assert leader.is_leader() and leader.cluster_id == "c0.1"
    # The other subcluster elected its lowest member designated.
    assert net.leader_of("c0.2") is not None


def test_commit_notify_is_idempotent():
    net = six_net()
    leader = net.elect("a")
    assert leader.admin_split(list(SUBS))[0]
    net.settle()
    node = net.nodes["e"]
    epoch_before = node.cluster_epoch
    completion_id = net.events_of("split_new_committed")[0][1]["config_id"]
    notify = m.CommitNotify(sender="a", old_cluster_id="c0",
                            config_id=completion_id, commit_index=3)
    node.on_message(notify, net.now)
    node.on_message(notify, net.now)
    assert node.cluster_epoch == epoch_before
    acks = [msg for _, msg in node.outbox
            if isinstance(msg, m.CommitNotify) and msg.is_ack]
    assert len(acks) == 2  # re-acked, never re-applied


def test_serve_pull_returns_only_committed_entries():
    net = Net({"c0": ["a", "b", "c"]})
    leader = net.elect("a")
    from shardraft import kvstore
    for i in range(4):
        leader.propose_command(kvstore.encode_command(kvstore.CMD_PUT, f"k{i}", "v"))
    net.settle(4)
    source = net.nodes["b"]
    assert source.commit_index >= 4
    source.on_message(m.PullRequest(sender="z", from_index=1, epoch=0), net.now)
    _, resp = source.outbox[-1]
    assert isinstance(resp, m.PullResponse)
    assert resp.status == m.PullStatus.ENTRIES
    assert resp.entries[0].index == 2
    assert resp.entries[-1].index <= source.commit_index


def test_serve_pull_not_ready_when_source_behind():
    net = Net({"c0": ["a", "b", "c"]})
    source = net.nodes["b"]
    source.on_message(m.PullRequest(sender="z", from_index=5, epoch=0), 0)
    _, resp = source.outbox[-1]
    assert resp.status == m.PullStatus.NOT_READY


def test_missed_node_completes_via_pull():
    net = six_net()
    leader = net.elect("a")
    # f is cut off for the whole split.
    blocked = {"f"}
    drop = lambda src, dst, msg: src in blocked or dst in blocked
    assert leader.admin_split(list(SUBS))[0]
    for _ in range(30):
        net.pump(drop=drop)
        net.tick_all()
    assert net.nodes["f"].cluster_epoch == 0  # still missed out
    # Heal; f's election attempt gets a pull redirect and it catches up.
    net.settle()
    assert net.nodes["f"].cluster_epoch == 1
    assert net.nodes["f"].cluster_id == "c0.2"


def test_parse_split_spec():
    subs = parse_split_spec("c1=a+b:..m,c2=c+d:m..*",
                            KeyRange.single("", None))
    assert subs[0].cluster_id == "c1"
    assert subs[0].members == ("a", "b")
    assert subs[1].key_range.spans[0].hi is None
    with pytest.raises(ConfigError):
        parse_split_spec("onlyone=a:..z", KeyRange.single("", None))
