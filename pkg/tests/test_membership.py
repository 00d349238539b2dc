"""Membership analytics: the overlap decision against the subset
enumeration oracle, the vote-count formulas against the arrival-order
enumeration, and the planner's step counts."""

import pytest
from hypothesis import given, settings, strategies as st

from shardraft.membership import (
    add_quorum_size,
    heatmap_csv,
    heatmap_diffs,
    intermediate_quorum_size,
    jc_vote_counts,
    jc_vote_counts_bruteforce,
    _jc_by_permutations,
    overlap_by_enumeration,
    plan_membership_change,
    PlanError,
    quorum_overlap_guaranteed,
    remove_quorum_size,
)
from shardraft.types import QuorumRule, majority_of

NODES = [f"n{i}" for i in range(1, 13)]


def test_overlap_majority_grow_by_one():
    a = QuorumRule.majority(["a", "b", "c"])
    b = QuorumRule.majority(["a", "b", "c", "d"])
    assert quorum_overlap_guaranteed(a, b)


def test_overlap_fails_for_two_to_five():
    a = QuorumRule.majority(["a", "b"])
    b = QuorumRule.majority(["a", "b", "c", "d", "e"])
    assert not quorum_overlap_guaranteed(a, b)


def test_overlap_self_majority():
    rule = QuorumRule.majority(["a", "b", "c"])
    assert quorum_overlap_guaranteed(rule, rule)


def test_low_threshold_rule_does_not_self_overlap():
    rule = QuorumRule.fixed(1, ["a", "b", "c"])
    assert not quorum_overlap_guaranteed(rule, rule)


def test_overlap_majority_vs_small_fixed():
    three = QuorumRule.majority(["a", "b", "c"])
    weak = QuorumRule.fixed(1, ["a", "b", "c"])
    assert not quorum_overlap_guaranteed(three, weak)


def test_joint_overlaps_old_majority():
    joint = QuorumRule.joint([["a", "b", "c"], ["d", "e", "f"]])
    old = QuorumRule.majority(["a", "b", "c", "d", "e", "f"])
    assert quorum_overlap_guaranteed(joint, old)
    assert quorum_overlap_guaranteed(old, joint)


def test_subcluster_majority_does_not_overlap_old():
    sub = QuorumRule.majority(["a", "b", "c"])
    old = QuorumRule.majority(["a", "b", "c", "d", "e", "f"])
    assert not quorum_overlap_guaranteed(sub, old)


def _rule_strategy(pool):
    members = st.lists(st.sampled_from(pool), min_size=1, max_size=6,
                       unique=True)

    def build(ms, kind, size_seed):
        if kind == 0:
            return QuorumRule.majority(ms)
        size = 1 + size_seed % len(ms)
        return QuorumRule.fixed(size, ms)

    return st.builds(build, members, st.integers(0, 1), st.integers(0, 5))


@settings(max_examples=300, deadline=None)
@given(_rule_strategy(NODES[:7]), _rule_strategy(NODES[2:9]))
def test_overlap_matches_enumeration(a, b):
    assert quorum_overlap_guaranteed(a, b) == overlap_by_enumeration(a, b)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(NODES[:4]), min_size=2, max_size=3, unique=True),
       st.lists(st.sampled_from(NODES[4:8]), min_size=2, max_size=3, unique=True),
       _rule_strategy(NODES[:8]))
def test_joint_overlap_matches_enumeration(g1, g2, b):
    joint = QuorumRule.joint([g1, g2])
    assert quorum_overlap_guaranteed(joint, b) == overlap_by_enumeration(joint, b)
    assert quorum_overlap_guaranteed(b, joint) == overlap_by_enumeration(b, joint)


# ---------------------------------------------------------------------------
# Quorum-size formulas


def test_add_quorum_two_to_five():
    assert add_quorum_size(2, 3) == 4


def test_add_quorum_one_node_equals_majority():
    # Single-node additions always land exactly on the new majority, which
    # is what makes them one-step changes.
    for n in range(1, 10):
        assert add_quorum_size(n, 1) == majority_of(n + 1)


def test_add_two_to_even_cluster_is_single_step():
    assert add_quorum_size(4, 2) == majority_of(6)


def test_remove_quorum_sizes():
    assert remove_quorum_size(5, 1) == 3
    assert remove_quorum_size(5, 2) == 4  # over the 5-member voter set


def test_intermediate_never_below_majority():
    for n_old in range(1, 11):
        for n_new in range(1, 11):
            q = intermediate_quorum_size(n_old, n_new)
            if n_new >= n_old:
                assert q >= majority_of(n_new)
            else:
                assert q >= majority_of(n_new)


# ---------------------------------------------------------------------------
# Vote counts vs joint consensus


def test_vote_counts_two_to_five():
    assert jc_vote_counts(2, 5) == (3, 5)


def test_vote_counts_identity():
    for n in range(1, 8):
        q = majority_of(n)
        assert jc_vote_counts(n, n) == (q, q)


def test_vote_counts_three_to_five():
    assert jc_vote_counts(3, 5) == (3, 4)


def test_vote_counts_match_bruteforce_to_ten():
    for n_old in range(1, 11):
        for n_new in range(1, 11):
            assert jc_vote_counts(n_old, n_new) == \
                jc_vote_counts_bruteforce(n_old, n_new), (n_old, n_new)


def test_bruteforce_matches_raw_permutations_small():
    for n_old in range(1, 6):
        for n_new in range(1, 6):
            assert jc_vote_counts_bruteforce(n_old, n_new) == \
                _jc_by_permutations(n_old, n_new), (n_old, n_new)


def test_heatmap_worst_case_never_positive():
    _, vs_worst = heatmap_diffs(10)
    for row in vs_worst:
        for cell in row:
            assert cell <= 0


def test_heatmap_best_case_zero_on_one_node_changes():
    vs_best, _ = heatmap_diffs(10)
    for n_old in range(1, 10):
        assert vs_best[n_old - 1][n_old] == 0      # add one
        assert vs_best[n_old][n_old - 1] == 0      # remove one
    for n in range(1, 11):
        assert vs_best[n - 1][n - 1] == 0          # identity


def test_heatmap_csv_shape():
    csv = heatmap_csv(4)
    lines = [ln for ln in csv.splitlines() if ln]
    assert lines[0].startswith("vs_best,")
    assert len(lines) == 2 * 5


# ---------------------------------------------------------------------------
# Planner


def members(n, start=1):
    return [f"n{i}" for i in range(start, start + n)]


def test_plan_one_node_changes_single_step():
    for n in range(2, 10):
        old = members(n)
        plan = plan_membership_change(old, old + [f"n{n + 1}"])
        assert plan.consensus_steps == 1, f"add one to {n}"
        plan = plan_membership_change(old, old[:-1])
        assert plan.consensus_steps == 1, f"remove one from {n}"


def test_plan_two_node_add_from_even_single_step():
    plan = plan_membership_change(members(4), members(6))
    assert plan.consensus_steps == 1


def test_plan_three_to_five_two_steps():
    plan = plan_membership_change(members(3), members(5))
    assert plan.consensus_steps == 2
    assert plan.steps[0].quorum_size == 4
    assert not plan.steps[0].is_stable()
    assert plan.steps[1].is_stable()


def test_plan_two_to_five():
    plan = plan_membership_change(members(2), members(5))
    assert plan.consensus_steps == 2
    assert plan.steps[0].quorum_size == 4


def test_plan_five_to_two_staged():
    plan = plan_membership_change(members(5), members(2))
    assert plan.staged
    # One extra consensus step compared to the two a joint-consensus change
    # would take.
    assert plan.consensus_steps == 3


def test_plan_rejects_removing_everyone():
    with pytest.raises(PlanError):
        plan_membership_change(members(3), [])


def test_plan_removal_keeps_leaving_nodes_voting():
    plan = plan_membership_change(members(5), members(3))
    step = plan.steps[0]
    assert not step.is_stable()
    assert set(step.voters) == set(members(5))
    assert step.quorum_size == 4


def test_every_plan_transition_passes_enumeration_oracle():
    sizes = [(o, n) for o in range(1, 8) for n in range(1, 8) if o != n]
    for o, n in sizes:
        old = members(o)
        new = members(n) if n <= o else members(o) + members(n - o, start=100)
        if not set(new) or old == new:
            continue
        try:
            plan = plan_membership_change(old, new)
        except PlanError:
            continue
        rules = plan.rules()
        for prev, nxt in zip(rules, rules[1:]):
            if len(set(prev.members()) | set(nxt.members())) <= 12:
                assert overlap_by_enumeration(prev, nxt), (o, n, prev, nxt)
