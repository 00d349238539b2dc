"""Core domain types: epoch-prefixed terms, key ranges, quorum rules,
cluster configurations, and log entries.

Everything here is immutable.  Mutable per-node protocol state lives in
:mod:`shardraft.node`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional

NodeId = str
ClusterId = str

U32_MAX = 0xFFFFFFFF


class ConfigError(ValueError):
    """A cluster configuration or quorum rule violates its invariants."""


# ---------------------------------------------------------------------------
# EpochTerm


@dataclass(frozen=True, order=True)
class EpochTerm:
    """An ordered (epoch, term) pair.

    The epoch counts completed split/merge reconfigurations and dominates
    the ordinary term, so leadership eras of newer cluster generations
    always outrank stale ones.  Packed into a u64 with the epoch in the
    high 32 bits, ordering of packed values equals lexicographic ordering
    of the pair.
    """

    epoch: int
    term: int

    def __post_init__(self) -> None:
        if not (0 <= self.epoch <= U32_MAX and 0 <= self.term <= U32_MAX):
            raise ValueError(f"epoch/term out of u32 range: {self.epoch}, {self.term}")

    def packed(self) -> int:
        return (self.epoch << 32) | self.term

    @staticmethod
    def unpack(value: int) -> "EpochTerm":
        if not (0 <= value <= (U32_MAX << 32 | U32_MAX)):
            raise ValueError(f"packed value out of u64 range: {value}")
        return EpochTerm(epoch=value >> 32, term=value & U32_MAX)

    def next_term(self) -> "EpochTerm":
        return EpochTerm(self.epoch, self.term + 1)

    def __str__(self) -> str:
        return f"{self.epoch}.{self.term}"


ZERO_ET = EpochTerm(0, 0)


def pack_epoch_term(epoch: int, term: int) -> int:
    return EpochTerm(epoch, term).packed()


def unpack_epoch_term(value: int) -> tuple[int, int]:
    et = EpochTerm.unpack(value)
    return et.epoch, et.term


# ---------------------------------------------------------------------------
# Key ranges

# A span is half-open: lo <= key < hi.  hi=None means unbounded above.


@dataclass(frozen=True, order=True)
class KeySpan:
    lo: str
    hi: Optional[str]

    def __post_init__(self) -> None:
        if self.hi is not None and self.hi <= self.lo:
            raise ConfigError(f"empty key span [{self.lo!r}, {self.hi!r})")

    def contains(self, key: str) -> bool:
        return key >= self.lo and (self.hi is None or key < self.hi)

    def overlaps(self, other: "KeySpan") -> bool:
        if self.hi is not None and other.lo >= self.hi:
            return False
        if other.hi is not None and self.lo >= other.hi:
            return False
        return True


@dataclass(frozen=True)
class KeyRange:
    """A union of disjoint half-open key spans, kept sorted and coalesced."""

    spans: tuple[KeySpan, ...]

    @staticmethod
    def single(lo: str, hi: Optional[str]) -> "KeyRange":
        return KeyRange(spans=(KeySpan(lo, hi),))

    @staticmethod
    def of(spans: Iterable[KeySpan]) -> "KeyRange":
        ordered = sorted(spans)
        merged: list[KeySpan] = []
        for s in ordered:
            if merged and merged[-1].overlaps(s):
                raise ConfigError(f"overlapping spans {merged[-1]} and {s}")
            if merged and merged[-1].hi == s.lo:
                merged[-1] = KeySpan(merged[-1].lo, s.hi)
            else:
                merged.append(s)
        return KeyRange(spans=tuple(merged))

    def contains(self, key: str) -> bool:
        return any(s.contains(key) for s in self.spans)

    def overlaps(self, other: "KeyRange") -> bool:
        return any(a.overlaps(b) for a in self.spans for b in other.spans)

    def union(self, other: "KeyRange") -> "KeyRange":
        return KeyRange.of(self.spans + other.spans)

    def is_empty(self) -> bool:
        return not self.spans

    def __str__(self) -> str:
        return ",".join(f"[{s.lo},{'∞' if s.hi is None else s.hi})" for s in self.spans)


EMPTY_RANGE = KeyRange(spans=())


def ranges_partition(whole: KeyRange, parts: list[KeyRange]) -> bool:
    """True iff `parts` are pairwise disjoint and their union equals `whole`."""
    for i, a in enumerate(parts):
        for b in parts[i + 1:]:
            if a.overlaps(b):
                return False
    try:
        combined = EMPTY_RANGE
        for p in parts:
            combined = combined.union(p)
    except ConfigError:
        return False
    return combined == whole


# ---------------------------------------------------------------------------
# Quorum rules


class QuorumKind(enum.Enum):
    MAJORITY = "majority"
    JOINT_ALL = "joint_all"
    FIXED = "fixed"


@dataclass(frozen=True)
class QuorumRule:
    """A vote-counting rule over one or more disjoint member groups.

    * ``MAJORITY``: floor(n/2)+1 votes from the single group.
    * ``JOINT_ALL``: a majority of every group simultaneously.
    * ``FIXED``: at least ``size`` votes from the single group; the size may
      exceed the majority but never undercut one vote.

    Votes from nodes outside the rule's groups never count.
    """

    kind: QuorumKind
    groups: tuple[tuple[NodeId, ...], ...]
    size: int = 0  # FIXED only

    def __post_init__(self) -> None:
        if not self.groups or any(not g for g in self.groups):
            raise ConfigError("quorum rule needs at least one non-empty group")
        seen: set[NodeId] = set()
        for g in self.groups:
            if len(set(g)) != len(g):
                raise ConfigError(f"duplicate member in group {g}")
            if seen & set(g):
                raise ConfigError("quorum groups must be disjoint")
            seen |= set(g)
        if self.kind != QuorumKind.JOINT_ALL and len(self.groups) != 1:
            raise ConfigError(f"{self.kind.value} rule takes exactly one group")
        if self.kind == QuorumKind.FIXED:
            if not (1 <= self.size <= len(self.groups[0])):
                raise ConfigError(
                    f"fixed quorum size {self.size} out of range for "
                    f"{len(self.groups[0])} members"
                )

    @staticmethod
    def majority(members: Iterable[NodeId]) -> "QuorumRule":
        return QuorumRule(QuorumKind.MAJORITY, (tuple(sorted(set(members))),))

    @staticmethod
    def joint(subgroups: Iterable[Iterable[NodeId]]) -> "QuorumRule":
        return QuorumRule(
            QuorumKind.JOINT_ALL,
            tuple(tuple(sorted(set(g))) for g in subgroups),
        )

    @staticmethod
    def fixed(size: int, members: Iterable[NodeId]) -> "QuorumRule":
        return QuorumRule(QuorumKind.FIXED, (tuple(sorted(set(members))),), size=size)

    def members(self) -> tuple[NodeId, ...]:
        out: set[NodeId] = set()
        for g in self.groups:
            out |= set(g)
        return tuple(sorted(out))

    def thresholds(self) -> tuple[int, ...]:
        """Per-group vote counts that satisfy this rule."""
        if self.kind == QuorumKind.FIXED:
            return (self.size,)
        return tuple(majority_of(len(g)) for g in self.groups)

    def satisfied(self, votes: Iterable[NodeId]) -> bool:
        vs = set(votes)
        for g, need in zip(self.groups, self.thresholds()):
            if len(vs & set(g)) < need:
                return False
        return True

    def describe(self) -> str:
        if self.kind == QuorumKind.MAJORITY:
            g = self.groups[0]
            return f"majority({majority_of(len(g))}/{len(g)})"
        if self.kind == QuorumKind.FIXED:
            return f"fixed({self.size}/{len(self.groups[0])})"
        return "joint[" + " ".join(f"{majority_of(len(g))}/{len(g)}" for g in self.groups) + "]"


def majority_of(n: int) -> int:
    return n // 2 + 1


def quorum_satisfied(rule: QuorumRule, votes: Iterable[NodeId]) -> bool:
    """True iff `votes` fulfill `rule`; outsiders are ignored, never counted."""
    return rule.satisfied(votes)


# ---------------------------------------------------------------------------
# Cluster configurations


class ConfigKind(enum.Enum):
    STABLE = "stable"
    SPLIT_JOINT = "split_joint"
    SPLIT_NEW = "split_new"
    NEW_QUORUM = "new_quorum"
    MERGE_TX = "merge_tx"
    MERGE_ABORT = "merge_abort"
    MERGE_NEW = "merge_new"


@dataclass(frozen=True)
class SubCluster:
    """One target subcluster of a split: its identity, members, and range."""

    cluster_id: ClusterId
    members: tuple[NodeId, ...]
    key_range: KeyRange

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(sorted(set(self.members))))
        if not self.members:
            raise ConfigError(f"subcluster {self.cluster_id} has no members")


@dataclass(frozen=True)
class Participant:
    """One cluster taking part in a merge transaction."""

    cluster_id: ClusterId
    members: tuple[NodeId, ...]
    key_range: KeyRange
    epoch: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(sorted(set(self.members))))


class TxDecision(enum.Enum):
    OK = "ok"
    NO = "no"


@dataclass(frozen=True)
class MergeTxRecord:
    """The merge-transaction intent committed during the prepare phase.

    ``decision`` is the local verdict of the cluster that committed this
    record; the transaction id makes redelivered prepare/commit messages
    idempotent.
    """

    tx_id: str
    coordinator: ClusterId
    participants: tuple[Participant, ...]
    merged_cluster_id: ClusterId
    resume_members: tuple[NodeId, ...]  # empty = all participants' members
    decision: TxDecision
    deciding_cluster: ClusterId

    def participant(self, cluster_id: ClusterId) -> Optional[Participant]:
        for p in self.participants:
            if p.cluster_id == cluster_id:
                return p
        return None

    def all_members(self) -> tuple[NodeId, ...]:
        out: set[NodeId] = set()
        for p in self.participants:
            out |= set(p.members)
        return tuple(sorted(out))


@dataclass(frozen=True)
class ClusterConfig:
    """A cluster configuration: members, owned key range, and the quorum
    rules used for leader election and for log commit.

    The two rules diverge only inside split phases; everywhere else they
    are the same majority.  ``kind`` tags which reconfiguration stage the
    config belongs to and drives how nodes apply it on receipt.
    """

    config_id: str
    cluster_id: ClusterId
    members: tuple[NodeId, ...]
    key_range: KeyRange
    kind: ConfigKind
    election_quorum: QuorumRule
    commit_quorum: QuorumRule
    # SPLIT_JOINT / SPLIT_NEW
    subclusters: tuple[SubCluster, ...] = ()
    # NEW_QUORUM
    quorum_size: int = 0
    final_members: tuple[NodeId, ...] = ()
    # MERGE_* (tx carries everything, including the abort's tx_id)
    tx: Optional[MergeTxRecord] = None
    epoch_new: int = 0  # MERGE_NEW only

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(sorted(set(self.members))))
        rule_members = set(self.election_quorum.members()) | set(self.commit_quorum.members())
        if not rule_members <= set(self.members):
            raise ConfigError("quorum rules draw from non-members")

    def subcluster_of(self, node: NodeId) -> Optional[SubCluster]:
        for sub in self.subclusters:
            if node in sub.members:
                return sub
        return None

    def describe(self) -> str:
        return (
            f"{self.kind.value}:{self.cluster_id} members={','.join(self.members)} "
            f"elect={self.election_quorum.describe()} commit={self.commit_quorum.describe()}"
        )


def _check_split_partition(base_members: Iterable[NodeId], base_range: KeyRange,
                           subs: tuple[SubCluster, ...]) -> None:
    if len(subs) < 2:
        raise ConfigError("a split needs at least two subclusters")
    all_members: list[NodeId] = []
    for sub in subs:
        all_members.extend(sub.members)
    if len(set(all_members)) != len(all_members):
        raise ConfigError("subcluster member sets overlap")
    if set(all_members) != set(base_members):
        raise ConfigError("subcluster members do not partition the cluster")
    ids = [s.cluster_id for s in subs]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate subcluster ids")
    if not ranges_partition(base_range, [s.key_range for s in subs]):
        raise ConfigError("subcluster ranges do not partition the key range")


def stable_config(config_id: str, cluster_id: ClusterId, members: Iterable[NodeId],
                  key_range: KeyRange) -> ClusterConfig:
    ms = tuple(sorted(set(members)))
    rule = QuorumRule.majority(ms)
    return ClusterConfig(
        config_id=config_id, cluster_id=cluster_id, members=ms, key_range=key_range,
        kind=ConfigKind.STABLE, election_quorum=rule, commit_quorum=rule,
    )


def split_joint_config(config_id: str, base: ClusterConfig,
                       subs: Iterable[SubCluster]) -> ClusterConfig:
    """Joint-mode config: elections need majorities of every subcluster,
    commits keep using the pre-split majority."""
    subs = tuple(subs)
    _check_split_partition(base.members, base.key_range, subs)
    return ClusterConfig(
        config_id=config_id, cluster_id=base.cluster_id, members=base.members,
        key_range=base.key_range, kind=ConfigKind.SPLIT_JOINT,
        election_quorum=QuorumRule.joint([s.members for s in subs]),
        commit_quorum=QuorumRule.majority(base.members),
        subclusters=subs,
    )


def split_new_config(config_id: str, joint: ClusterConfig) -> ClusterConfig:
    """Split-completion config, derived from the joint config it follows."""
    if joint.kind != ConfigKind.SPLIT_JOINT:
        raise ConfigError("split completion must derive from a joint config")
    return ClusterConfig(
        config_id=config_id, cluster_id=joint.cluster_id, members=joint.members,
        key_range=joint.key_range, kind=ConfigKind.SPLIT_NEW,
        election_quorum=joint.election_quorum,
        commit_quorum=joint.commit_quorum,
        subclusters=joint.subclusters,
    )


def new_quorum_config(config_id: str, cluster_id: ClusterId, key_range: KeyRange,
                      voters: Iterable[NodeId], quorum_size: int,
                      final_members: Iterable[NodeId]) -> ClusterConfig:
    """Membership-change intermediate: both quorums are a fixed size drawn
    from the full voter set (which may still include leaving nodes)."""
    vs = tuple(sorted(set(voters)))
    rule = QuorumRule.fixed(quorum_size, vs)
    return ClusterConfig(
        config_id=config_id, cluster_id=cluster_id, members=vs, key_range=key_range,
        kind=ConfigKind.NEW_QUORUM, election_quorum=rule, commit_quorum=rule,
        quorum_size=quorum_size, final_members=tuple(sorted(set(final_members))),
    )


def merge_tx_config(config_id: str, base: ClusterConfig, tx: MergeTxRecord) -> ClusterConfig:
    """Transaction-intent config; quorums stay exactly as they were."""
    ranges = [p.key_range for p in tx.participants]
    for i, a in enumerate(ranges):
        for b in ranges[i + 1:]:
            if a.overlaps(b):
                raise ConfigError("merge participants' ranges overlap")
    if tx.resume_members:
        resume = set(tx.resume_members)
        if not resume <= set(tx.all_members()):
            raise ConfigError("resume members outside the merging clusters")
        if not any(set(p.members) <= resume for p in tx.participants):
            raise ConfigError("resume members must cover at least one whole subcluster")
    return ClusterConfig(
        config_id=config_id, cluster_id=base.cluster_id, members=base.members,
        key_range=base.key_range, kind=ConfigKind.MERGE_TX,
        election_quorum=base.election_quorum, commit_quorum=base.commit_quorum,
        tx=tx,
    )


def merge_abort_config(config_id: str, base: ClusterConfig, tx: MergeTxRecord) -> ClusterConfig:
    return ClusterConfig(
        config_id=config_id, cluster_id=base.cluster_id, members=base.members,
        key_range=base.key_range, kind=ConfigKind.MERGE_ABORT,
        election_quorum=base.election_quorum, commit_quorum=base.commit_quorum,
        tx=tx,
    )


def merge_new_config(config_id: str, base: ClusterConfig, tx: MergeTxRecord,
                     epoch_new: int) -> ClusterConfig:
    """The merged cluster's config, applied only after it commits."""
    combined = EMPTY_RANGE
    for p in tx.participants:
        combined = combined.union(p.key_range)
    members = tuple(tx.resume_members) if tx.resume_members else tx.all_members()
    rule = QuorumRule.majority(members)
    return ClusterConfig(
        config_id=config_id, cluster_id=tx.merged_cluster_id,
        members=tx.all_members(), key_range=combined, kind=ConfigKind.MERGE_NEW,
        election_quorum=rule, commit_quorum=rule,
        tx=tx, epoch_new=epoch_new,
    )


# ---------------------------------------------------------------------------
# Log entries


class PayloadKind(enum.Enum):
    NOOP = 0
    COMMAND = 1
    CONFIG = 2


@dataclass(frozen=True)
class LogEntry:
    """One replicated log slot: an opaque command, a configuration record,
    or a no-op seeded by fresh leaders."""

    index: int
    at: EpochTerm
    kind: PayloadKind
    command: bytes = b""
    config: Optional[ClusterConfig] = None

    def __post_init__(self) -> None:
        if self.kind == PayloadKind.CONFIG and self.config is None:
            raise ValueError("config entry without a config")

    @staticmethod
    def noop(index: int, at: EpochTerm) -> "LogEntry":
        return LogEntry(index=index, at=at, kind=PayloadKind.NOOP)

    @staticmethod
    def cmd(index: int, at: EpochTerm, data: bytes) -> "LogEntry":
        return LogEntry(index=index, at=at, kind=PayloadKind.COMMAND, command=data)

    @staticmethod
    def cfg(index: int, at: EpochTerm, config: ClusterConfig) -> "LogEntry":
        return LogEntry(index=index, at=at, kind=PayloadKind.CONFIG, config=config)
