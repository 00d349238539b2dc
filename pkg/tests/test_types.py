import pytest
from hypothesis import given, strategies as st

from shardraft.types import (
    ConfigError,
    EpochTerm,
    KeyRange,
    KeySpan,
    QuorumRule,
    pack_epoch_term,
    quorum_satisfied,
    ranges_partition,
    unpack_epoch_term,
)


def test_pack_places_epoch_in_high_bits():
    assert pack_epoch_term(1, 5) == 0x0000000100000005
    assert pack_epoch_term(0, 0) == 0


def test_pack_orders_epoch_above_term():
    assert pack_epoch_term(1, 0) > pack_epoch_term(0, 0xFFFFFFFF)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
       st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_pack_order_matches_lexicographic(e1, t1, e2, t2):
    assert (pack_epoch_term(e1, t1) < pack_epoch_term(e2, t2)) == ((e1, t1) < (e2, t2))


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_pack_unpack_roundtrip(e, t):
    assert unpack_epoch_term(pack_epoch_term(e, t)) == (e, t)


def test_epoch_term_boundaries():
    with pytest.raises(ValueError):
        EpochTerm(2**32, 0)
    with pytest.raises(ValueError):
        EpochTerm(0, -1)
    assert EpochTerm(2**32 - 1, 2**32 - 1).packed() == 2**64 - 1


def test_majority_quorum():
    rule = QuorumRule.majority(["a", "b", "c"])
    assert quorum_satisfied(rule, {"a", "b"})
    assert not quorum_satisfied(rule, {"a"})
    # Outsiders never count.
    assert not quorum_satisfied(rule, {"a", "x", "y"})


def test_joint_quorum_needs_every_group():
    rule = QuorumRule.joint([["a", "b", "c"], ["d", "e", "f"]])
    assert not quorum_satisfied(rule, {"a", "b", "d"})
    assert quorum_satisfied(rule, {"a", "b", "d", "e"})


def test_fixed_quorum():
    rule = QuorumRule.fixed(4, ["n1", "n2", "n3", "n4", "n5"])
    assert not quorum_satisfied(rule, {"n1", "n2", "n3"})
    assert quorum_satisfied(rule, {"n1", "n2", "n3", "n4"})


def test_fixed_quorum_validation():
    with pytest.raises(ConfigError):
        QuorumRule.fixed(4, ["a", "b"])
    with pytest.raises(ConfigError):
        QuorumRule.fixed(0, ["a", "b"])


def test_joint_groups_must_be_disjoint():
    with pytest.raises(ConfigError):
        QuorumRule.joint([["a", "b"], ["b", "c"]])


def test_key_span_contains():
    s = KeySpan("b", "m")
    assert s.contains("b") and s.contains("c") and not s.contains("m")
    unbounded = KeySpan("m", None)
    assert unbounded.contains("zzz")


def test_key_range_partition():
    whole = KeyRange.single("a", None)
    left = KeyRange.single("a", "m")
    right = KeyRange.single("m", None)
    assert ranges_partition(whole, [left, right])
    assert not ranges_partition(whole, [left, left])
    assert not ranges_partition(whole, [left])


def test_key_range_union_coalesces_adjacent():
    merged = KeyRange.single("a", "m").union(KeyRange.single("m", "z"))
    assert merged == KeyRange.single("a", "z")


def test_key_range_union_keeps_gaps():
    merged = KeyRange.single("a", "c").union(KeyRange.single("x", "z"))
    assert len(merged.spans) == 2
    assert merged.contains("b") and merged.contains("y")
    assert not merged.contains("m")


def test_overlapping_union_rejected():
    with pytest.raises(ConfigError):
        KeyRange.single("a", "m").union(KeyRange.single("c", "z"))
