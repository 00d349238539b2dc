"""Core protocol unit tests: voting, replication, commit rules, the
precondition gate, and wait-free configuration handling."""

import random

import pytest

from shardraft import messages as m
from shardraft.node import Node, Role, Timing
from shardraft.types import (
    ConfigKind,
    EpochTerm,
    KeyRange,
    LogEntry,
    QuorumRule,
    SubCluster,
    new_quorum_config,
    stable_config,
)

from harness import Net


def make_node(node_id="a", members=("a", "b", "c")) -> Node:
    cfg = stable_config("t", "c0", members, KeyRange.single("", None))
    node = Node(node_id, cfg, Timing(), random.Random(1))
    node.deadlines.clear()
    return node


def last_msg(node, kind):
    for dst, msg in reversed(node.outbox):
        if isinstance(msg, kind):
            return dst, msg
    return None, None


# ---------------------------------------------------------------------------
# Voting


def test_vote_granted_once_per_term():
    node = make_node()
    req_a = m.VoteRequest(candidate="b", at=EpochTerm(0, 3).packed(),
                          last_index=0, last_at=0)
    node.on_message(req_a, 0)
    _, resp = last_msg(node, m.VoteResponse)
    assert resp.verdict == m.VoteVerdict.GRANT

    node.outbox.clear()
    req_b = m.VoteRequest(candidate="c", at=EpochTerm(0, 3).packed(),
                          last_index=0, last_at=0)
    node.on_message(req_b, 0)
    _, resp = last_msg(node, m.VoteResponse)
    assert resp.verdict == m.VoteVerdict.DENY


def test_vote_denied_for_stale_log():
    node = make_node()
    node._append_entry(LogEntry.cmd(1, EpochTerm(0, 2), b"x"))
    req = m.VoteRequest(candidate="b", at=EpochTerm(0, 3).packed(),
                        last_index=0, last_at=0)
    node.on_message(req, 0)
    _, resp = last_msg(node, m.VoteResponse)
    assert resp.verdict == m.VoteVerdict.DENY


def test_vote_grants_and_adopts_newer_term():
    node = make_node()
    node._append_entry(LogEntry.cmd(1, EpochTerm(0, 2), b"x"))
    req = m.VoteRequest(candidate="b", at=EpochTerm(0, 3).packed(),
                        last_index=2, last_at=EpochTerm(0, 2).packed())
    node.on_message(req, 0)
    _, resp = last_msg(node, m.VoteResponse)
    assert resp.verdict == m.VoteVerdict.GRANT
    assert node.current == EpochTerm(0, 3)


def test_vote_request_from_older_epoch_gets_pull():
    node = make_node()
    node.current = EpochTerm(2, 1)
    req = m.VoteRequest(candidate="b", at=EpochTerm(1, 9).packed(),
                        last_index=50, last_at=EpochTerm(1, 9).packed())
    node.on_message(req, 0)
    _, resp = last_msg(node, m.VoteResponse)
    assert resp.verdict == m.VoteVerdict.PULL
    # A redirect, not a vote: no term adopted, no vote consumed.
    assert node.current == EpochTerm(2, 1)
    assert node.voted_for is None


# ---------------------------------------------------------------------------
# Append handling


def test_heartbeat_acks_without_change():
    node = make_node()
    hb = m.AppendEntries(leader="b", at=EpochTerm(0, 1).packed(),
                         prev_index=0, prev_at=0, entries=(), leader_commit=0)
    node.on_message(hb, 0)
    _, resp = last_msg(node, m.AppendResponse)
    assert resp.ok and resp.match_index == 0
    assert node.leader_hint == "b"


def test_append_rejects_lower_epoch_term():
    node = make_node()
    node.current = EpochTerm(1, 1)
    stale = m.AppendEntries(leader="b", at=EpochTerm(0, 9).packed(),
                            prev_index=0, prev_at=0, entries=(), leader_commit=0)
    node.on_message(stale, 0)
    _, resp = last_msg(node, m.AppendResponse)
    assert not resp.ok


def test_append_truncates_conflicting_suffix():
    node = make_node()
    node._append_entry(LogEntry.cmd(1, EpochTerm(0, 1), b"keep"))
    node._append_entry(LogEntry.cmd(2, EpochTerm(0, 1), b"stale"))
    fresh = LogEntry.cmd(2, EpochTerm(0, 2), b"fresh")
    msg = m.AppendEntries(leader="b", at=EpochTerm(0, 2).packed(),
                          prev_index=1, prev_at=EpochTerm(0, 1).packed(),
                          entries=(fresh,), leader_commit=0)
    node.on_message(msg, 0)
    assert node.entry_at(2).command == b"fresh"
    assert node.last_index() == 2


def test_append_conflict_hint_points_at_term_start():
    node = make_node()
    for i in (1, 2, 3):
        node._append_entry(LogEntry.cmd(i, EpochTerm(0, 1), b"x"))
    probe = m.AppendEntries(leader="b", at=EpochTerm(0, 2).packed(),
                            prev_index=3, prev_at=EpochTerm(0, 2).packed(),
                            entries=(), leader_commit=0)
    node.on_message(probe, 0)
    _, resp = last_msg(node, m.AppendResponse)
    assert not resp.ok
    assert resp.conflict_index == 1  # whole log is term 1


def test_divergence_below_commit_requests_snapshot():
    node = make_node()
    node._append_entry(LogEntry.cmd(1, EpochTerm(0, 1), b"x"))
    node.commit_index = 1
    msg = m.AppendEntries(leader="b", at=EpochTerm(2, 1).packed(),
                          prev_index=1, prev_at=EpochTerm(2, 0).packed(),
                          entries=(), leader_commit=1)
    node.on_message(msg, 0)
    _, resp = last_msg(node, m.AppendResponse)
    assert not resp.ok and resp.conflict_index == 0


# ---------------------------------------------------------------------------
# Commit rules and leadership


def test_leader_commits_with_majority():
    net = Net({"c0": ["a", "b", "c"]})
    leader = net.elect("a")
    from shardraft import kvstore
    ok, _ = leader.propose_command(kvstore.encode_command(kvstore.CMD_PUT, "k", "v"))
    assert ok
    net.pump()
    assert leader.commit_index == 2  # no-op + command
    net.tick_all(Timing().heartbeat + 1)  # followers learn via heartbeat
    net.pump()
    assert net.nodes["b"].commit_index == 2
    assert net.nodes["b"].kv == {"k": "v"}


def test_old_term_entry_not_counted_directly():
    node = make_node()
    node.current = EpochTerm(0, 2)
    node.role = Role.LEADER
    node.next_index = {"b": 2, "c": 2}
    node.match_index = {"b": 1, "c": 1}
    node._append_entry(LogEntry.cmd(1, EpochTerm(0, 1), b"old"))
    node._advance_commit()
    assert node.commit_index == 0  # replicated everywhere, still old-term


def test_single_node_cluster_commits_instantly():
    cfg = stable_config("t", "c0", ["solo"], KeyRange.single("", None))
    node = Node("solo", cfg, Timing(), random.Random(1))
    node.start_election()
    assert node.is_leader()
    ok, _ = node.propose_command(b"x")
    assert ok and node.commit_index == 2


# ---------------------------------------------------------------------------
# Preconditions


def proposal(members=("a", "b", "c", "d")):
    return stable_config("p", "c0", members, KeyRange.single("", None))


def test_preconditions_pass_after_noop_commit():
    net = Net({"c0": ["a", "b", "c"]})
    leader = net.elect("a")
    assert leader.check_preconditions(proposal()) is None


def test_p3_before_first_commit():
    net = Net({"c0": ["a", "b", "c"]})
    leader = net.nodes["a"]
    leader.start_election()  # votes not yet delivered: no no-op committed
    net.nodes["b"].on_message(leader.outbox[0][1], 0)
    _, resp = last_msg(net.nodes["b"], m.VoteResponse)
    leader.on_message(resp, 0)
    assert leader.is_leader()
    assert leader.check_preconditions(proposal()) == "P3"


def test_p1_with_uncommitted_config():
    net = Net({"c0": ["a", "b", "c"]})
    leader = net.elect("a")
    ok, _ = leader.propose_reconfig(proposal())
    assert ok
    # The add entry is still uncommitted: a second change must be refused.
    violated = leader.check_preconditions(proposal(("a", "b", "c", "e")))
    assert violated == "P1"


def test_p2_overlap_violation():
    net = Net({"c0": ["a", "b", "c"]})
    leader = net.elect("a")
    weak = new_quorum_config("w", "c0", KeyRange.single("", None),
                             voters=("a", "b", "c"), quorum_size=1,
                             final_members=("a", "b", "c"))
    assert leader.check_preconditions(weak) == "P2'"


def test_rejection_surfaces_label():
    net = Net({"c0": ["a", "b", "c"]})
    leader = net.elect("a")
    leader.propose_reconfig(proposal())
    ok, why = leader.propose_reconfig(proposal(("a", "b", "c", "e")))
    assert not ok and why == "P1"


# ---------------------------------------------------------------------------
# Wait-free application and revert


def joint_entry(index, at=EpochTerm(0, 1)):
    base = stable_config("b", "c0", ["a", "b", "c", "d"], KeyRange.single("", None))
    from shardraft.types import split_joint_config
    cfg = split_joint_config("j", base, (
        SubCluster("c0.1", ("a", "b"), KeyRange.single("", "m")),
        SubCluster("c0.2", ("c", "d"), KeyRange.single("m", None)),
    ))
    return LogEntry.cfg(index, at, cfg)


def test_wait_free_revert_round_trip():
    node = make_node("a", ("a", "b", "c", "d"))
    before = (node.election_rule, node.commit_rule, node.proposal_range)
    node._append_entry(joint_entry(1))
    assert node.election_rule.kind.name == "JOINT_ALL"
    node._truncate_from(1)
    assert (node.election_rule, node.commit_rule, node.proposal_range) == before
    assert node.joint_cfg is None


def test_joint_receipt_changes_election_only():
    node = make_node("a", ("a", "b", "c", "d"))
    commit_before = node.commit_rule
    node._append_entry(joint_entry(1))
    assert node.election_rule.kind.name == "JOINT_ALL"
    assert node.commit_rule == commit_before


def test_new_quorum_receipt_changes_both():
    node = make_node("a", ("a", "b"))
    cfg = new_quorum_config("q", "c0", KeyRange.single("", None),
                            voters=("a", "b", "c", "d", "e"), quorum_size=4,
                            final_members=("a", "b", "c", "d", "e"))
    node._append_entry(LogEntry.cfg(1, EpochTerm(0, 1), cfg))
    assert node.election_rule.describe() == "fixed(4/5)"
    assert node.commit_rule.describe() == "fixed(4/5)"


def test_merge_config_receipt_changes_nothing():
    from shardraft.merge import build_tx, with_decision
    from shardraft.types import Participant, merge_tx_config

    node = make_node("a", ("a", "b", "c"))
    rules_before = (node.election_rule, node.commit_rule)
    tx = build_tx("t:1:1", "c0", [
        Participant("c0", ("a", "b", "c"), KeyRange.single("", "m"), 0),
        Participant("c1", ("d", "e", "f"), KeyRange.single("m", None), 0),
    ])
    cfg = merge_tx_config("x", node.committed_cfg, with_decision(tx, "c0", True))
    node._append_entry(LogEntry.cfg(1, EpochTerm(0, 1), cfg))
    assert (node.election_rule, node.commit_rule) == rules_before


def test_epoch_term_monotone_via_adoption():
    node = make_node()
    node.on_message(m.AppendEntries(leader="b", at=EpochTerm(1, 4).packed(),
                                    prev_index=0, prev_at=0, entries=(),
                                    leader_commit=0), 0)
    assert node.current == EpochTerm(1, 4)
    node.on_message(m.AppendEntries(leader="c", at=EpochTerm(0, 9).packed(),
                                    prev_index=0, prev_at=0, entries=(),
                                    leader_commit=0), 0)
    assert node.current == EpochTerm(1, 4)  # lower packed value ignored


def test_read_gate_closes_without_quorum_contact():
    net = Net({"c0": ["a", "b", "c"]})
    leader = net.elect("a")
    leader.last_ack = {"b": 0, "c": 0}
    leader.now = 0
    assert leader._read_gate_open()
    leader.now = Timing().election_min + 1
    assert not leader._read_gate_open()
