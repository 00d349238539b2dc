"""The protocol engine: one sequential event processor per node.

A node consumes one input at a time (a message or a timer tick), mutates
its own state, and queues outgoing messages; nothing is shared between
nodes.  The same engine runs under the deterministic simulator and under
the paced real-time service loop.

Reconfiguration entries apply wait-free: receiving a configuration entry
changes the relevant quorum immediately, and a truncation that removes the
entry restores the cached previous pair.  Three preconditions gate every
new reconfiguration proposal:

* P1  -- no unresolved reconfiguration (uncommitted config entry, open
         merge transaction, or a split still in flight);
* P2' -- the proposed commit quorum overlaps the current one;
* P3  -- the leader has committed an entry stamped with its own term.

Split and merge completions advance the epoch half of the node's
``EpochTerm``; membership changes never touch it.
"""

from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import kvstore, merge as merge_mod, messages as m, wire
from .membership import majority_of, plan_membership_change, PlanError, quorum_overlap_guaranteed, remove_allowed
from .recovery import (
    HistoryRecord,
    NamingRegistry,
    ReconfigHistory,
    range_from_obj,
    range_to_obj,
)
from .split import derive_completion
from .storage import MemoryStore, Store
from .types import (
    ClusterConfig,
    ConfigError,
    ConfigKind,
    EpochTerm,
    KeyRange,
    LogEntry,
    MergeTxRecord,
    NodeId,
    Participant,
    PayloadKind,
    QuorumRule,
    SubCluster,
    ZERO_ET,
    merge_abort_config,
    merge_new_config,
    merge_tx_config,
    split_joint_config,
    stable_config,
)


class Role(enum.Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"
    RETIRED = "retired"


@dataclass
class Timing:
    """Timer parameters, in integer microseconds of driver time."""

    election_min: int = 150_000
    election_max: int = 300_000
    heartbeat: int = 50_000
    pull_retry: int = 100_000
    merge_retry: int = 150_000
    notify_retry: int = 120_000
    snapshot_retry: int = 100_000
    notify_attempts: int = 10
    max_append_entries: int = 64
    pull_chunk: int = 256
    snapshot_chunk: int = 64 * 1024


@dataclass
class PendingConfig:
    """A config entry applied wait-free but not yet committed, plus the
    state to restore if it gets truncated."""

    index: int
    config: ClusterConfig
    prev_election: QuorumRule
    prev_commit: QuorumRule
    prev_joint: Optional[ClusterConfig]
    prev_split_new: Optional[tuple[int, ClusterConfig]]
    prev_range: KeyRange


@dataclass
class TxState:
    """Volatile 2PC driver state, rebuilt from committed entries."""

    record: MergeTxRecord
    tx_index: int
    responses: dict[str, tuple[bool, int]] = field(default_factory=dict)
    acks: set = field(default_factory=set)
    resolution: Optional[ClusterConfig] = None
    resolution_committed: bool = False
    defer_exchange: bool = False
    # Last seen leader of the coordinating cluster; responses go there first.
    coordinator_hint: Optional[NodeId] = None


@dataclass
class Exchange:
    """Snapshot-exchange progress after a merge config commits."""

    config: ClusterConfig
    snaps: dict[str, bytes]
    pending: list[str]
    xfers: dict[str, merge_mod.SnapshotXfer] = field(default_factory=dict)
    source_rotation: dict[str, int] = field(default_factory=dict)


@dataclass
class InstallState:
    """Chunk reassembly for a leader-pushed snapshot install."""

    leader: NodeId
    xfer: merge_mod.SnapshotXfer = field(default_factory=merge_mod.SnapshotXfer)


class Node:
    """One protocol participant.

    Drive it by calling :meth:`on_message` / :meth:`on_tick` and draining
    :attr:`outbox` (a list of ``(destination, message)`` pairs) after each
    call.  ``observer(kind, data)`` receives structured trace events.
    Client and admin traffic uses plain tuples instead of wire messages;
    they are process-local in service mode and simulated like any other
    message in the simulator.
    """

    def __init__(self, node_id: NodeId, config: ClusterConfig, timing: Timing,
                 rng: random.Random, store: Optional[Store] = None,
                 observer: Optional[Callable[[str, dict], None]] = None,
                 registry: Optional[NamingRegistry] = None,
                 now: int = 0,
                 defects: frozenset = frozenset()) -> None:
        self.id = node_id
        self.timing = timing
        self.rng = rng
        self.store = store if store is not None else MemoryStore()
        self.observer = observer or (lambda kind, data: None)
        self.registry = registry
        self.defects = defects

        self.role = Role.FOLLOWER
        self.current = ZERO_ET
        self.voted_for: Optional[NodeId] = None
        self.leader_hint: Optional[NodeId] = None

        self.log: list[LogEntry] = []
        self.base_index = 0
        self.base_at = ZERO_ET
        self.log_era_epoch = 0  # epoch at which this log's numbering began
        self.commit_index = 0
        self.applied_index = 0
        self.kv: dict[str, str] = {}
        self._chain: list[bytes] = [b"\x00" * 8]

        self.cluster_id = config.cluster_id
        self.cluster_epoch = 0  # generation of this cluster (era), not the term
        self.members: tuple[NodeId, ...] = config.members
        self.key_range: KeyRange = config.key_range
        self.election_rule: QuorumRule = config.election_quorum
        self.commit_rule: QuorumRule = config.commit_quorum
        self.proposal_range: KeyRange = config.key_range
        self.committed_cfg: ClusterConfig = config
        self.committed_cfg_index = 0
        self.last_config_index = 0

        self.pending: list[PendingConfig] = []
        self.joint_cfg: Optional[ClusterConfig] = None
        self.joint_committed = False
        self.split_new: Optional[tuple[int, ClusterConfig]] = None

        self.history = ReconfigHistory()
        self.txs: dict[str, TxState] = {}
        self.exchange: Optional[Exchange] = None
        self.install: Optional[InstallState] = None
        self._tx_seq = 0
        self._merge_request: Optional[dict] = None
        self._pending_coordinator_hint: Optional[NodeId] = None

        self.outbox: list[tuple[str, object]] = []
        self.deadlines: dict[str, int] = {}
        self.now = now

        # Leader volatile state.
        self.next_index: dict[NodeId, int] = {}
        self.match_index: dict[NodeId, int] = {}
        self.last_ack: dict[NodeId, int] = {}
        self.pending_acks: dict[int, tuple[str, str]] = {}
        self.votes: set = set()
        self.committed_in_term = False
        self.install_progress: dict[NodeId, int] = {}

        # Split completion notification retries.
        self.notify_targets: dict[NodeId, int] = {}
        self.notify_msg: Optional[m.CommitNotify] = None

        # Pull-based recovery.
        self.pull_sources: list[NodeId] = []
        self.pull_active = False
        self.pull_goal_epoch = 0

        self._cfg_digest = b""
        self._refresh_cfg_digest()
        self._arm_election_timer()

    # ------------------------------------------------------------------
    # Construction from durable state

    @classmethod
    def recover(cls, node_id: NodeId, fallback_config: ClusterConfig, timing: Timing,
                rng: random.Random, store: Store,
                observer: Optional[Callable[[str, dict], None]] = None,
                registry: Optional[NamingRegistry] = None, now: int = 0,
                defects: frozenset = frozenset()) -> "Node":
        state = store.recover()
        node = cls(node_id, fallback_config, timing, rng, store=store,
                   observer=observer, registry=registry, now=now, defects=defects)
        node.current = state.current
        node.voted_for = state.voted_for
        node.history = ReconfigHistory.from_objs(state.history)
        if state.base_snapshot is not None:
            snap = state.base_snapshot
            node.kv = dict(snap["kv"])
            node.base_index = snap["last_index"]
            node.base_at = EpochTerm.unpack(snap["last_at"])
            node.log_era_epoch = node.base_at.epoch
            node.cluster_epoch = node.base_at.epoch
            node.commit_index = node.base_index
            node.applied_index = node.base_index
            node.cluster_id = snap["source_cluster"]
            node.key_range = snap["key_range"]
            node.proposal_range = snap["key_range"]
            node._chain = [node._base_seed()]
        for entry in state.entries:
            node._append_entry(entry, persist=False, replay=True)
        node._recover_completions()
        node._refresh_cfg_digest()
        node.emit("recovered", {"last_index": node.last_index(),
                                "base_index": node.base_index,
                                "commit_index": node.commit_index,
                                "epoch": node.current.epoch,
                                "cluster": node.cluster_id})
        return node

    def _recover_completions(self) -> None:
        """Restore post-completion identity that the raw log cannot carry;
        the durable history says which reconfigurations this node finished."""
        first = self.entry_at(self.base_index + 1)
        if first is not None and first.kind == PayloadKind.CONFIG \
                and first.config.kind == ConfigKind.MERGE_NEW:
            rec = self.history.find(first.config.config_id)
            if rec is not None and rec.completed.get(self.id):
                self.commit_index = max(self.commit_index, first.index)
                self.applied_index = max(self.applied_index, first.index)
                self._adopt_merged_identity(first.index, first.config)
                return
        if self.split_new is not None:
            idx, cfg = self.split_new
            rec = self.history.find(cfg.config_id)
            if rec is not None and rec.completed.get(self.id):
                self.commit_index = max(self.commit_index, idx)
                self._finish_split(idx, cfg, recovering=True)

    # ------------------------------------------------------------------
    # Small helpers

    def emit(self, kind: str, data: dict) -> None:
        self.observer(kind, data)

    def last_index(self) -> int:
        return self.base_index + len(self.log)

    def entry_at(self, index: int) -> Optional[LogEntry]:
        if index <= self.base_index or index > self.last_index():
            return None
        return self.log[index - self.base_index - 1]

    def stamp_at(self, index: int) -> EpochTerm:
        if index == self.base_index:
            return self.base_at
        e = self.entry_at(index)
        return e.at if e else ZERO_ET

    def _base_seed(self) -> bytes:
        h = hashlib.sha256()
        h.update(self.base_index.to_bytes(8, "big"))
        h.update(self.base_at.packed().to_bytes(8, "big"))
        h.update(kvstore.state_digest(self.kv).encode())
        return h.digest()[:8]

    def _refresh_cfg_digest(self) -> None:
        h = hashlib.sha256()
        h.update(self.cluster_id.encode())
        h.update(self.election_rule.describe().encode())
        h.update(self.commit_rule.describe().encode())
        h.update(",".join(self.members).encode())
        self._cfg_digest = h.digest()[:8]

    def state_digest(self) -> str:
        h = hashlib.sha256()
        h.update(self._chain[-1])
        h.update(self.commit_index.to_bytes(8, "big"))
        h.update(self.current.packed().to_bytes(8, "big"))
        h.update(self._cfg_digest)
        return h.hexdigest()[:16]

    def is_leader(self) -> bool:
        return self.role == Role.LEADER

    def send(self, dst: str, msg: object) -> None:
        self.outbox.append((dst, msg))

    def _persist_meta(self) -> None:
        self.store.persist_meta(self.current, self.voted_for)

    def _persist_history(self) -> None:
        self.store.save_history(self.history.to_objs())

    def _emit_view(self) -> None:
        self.emit("cluster_view", {
            "cluster": self.cluster_id, "epoch": self.cluster_epoch,
            "members": sorted(self.members),
        })

    def _adopt(self, at: EpochTerm) -> None:
        """Adopt a higher observed epoch+term; resets the vote slot."""
        if at.packed() <= self.current.packed():
            return
        self.current = at
        self.voted_for = None
        self.committed_in_term = False
        self._persist_meta()
        if self.role in (Role.LEADER, Role.CANDIDATE):
            self._become_follower()

    def _become_follower(self) -> None:
        if self.role == Role.RETIRED:
            return
        if self.role != Role.FOLLOWER:
            self.role = Role.FOLLOWER
            self.emit("role", {"role": "follower", "cluster": self.cluster_id,
                               "epoch": self.current.epoch, "term": self.current.term,
                               "via": "step_down"})
        self.deadlines.pop("heartbeat", None)
        if self.txs and self.exchange is None:
            self.deadlines.setdefault("merge", self.now + self.timing.merge_retry)
        self._arm_election_timer()

    def _retire(self, reason: str) -> None:
        self.role = Role.RETIRED
        self.deadlines.clear()
        self.emit("role", {"role": "retired", "cluster": self.cluster_id,
                           "epoch": self.current.epoch, "term": self.current.term,
                           "via": reason})

    def _arm_election_timer(self) -> None:
        if self.role == Role.RETIRED or self.exchange is not None:
            return
        span = self.timing.election_max - self.timing.election_min
        self.deadlines["election"] = self.now + self.timing.election_min + \
            self.rng.randrange(span)

    def next_deadline(self) -> Optional[int]:
        return min(self.deadlines.values()) if self.deadlines else None

    # ------------------------------------------------------------------
    # Log manipulation

    def _append_entry(self, entry: LogEntry, persist: bool = True,
                      replay: bool = False) -> None:
        assert entry.index == self.last_index() + 1, \
            f"{self.id}: non-contiguous append {entry.index} after {self.last_index()}"
        self.log.append(entry)
        self._chain.append(
            hashlib.sha256(self._chain[-1] + wire.encode_entry(entry)).digest()[:8])
        if persist:
            self.store.persist_entry(entry)
        if entry.kind == PayloadKind.CONFIG:
            self.last_config_index = entry.index
        if not replay:
            data = {
                "index": entry.index, "at": entry.at.packed(),
                "payload": entry.kind.name.lower(),
                "cfg_kind": entry.config.kind.value if entry.config else "",
                "digest": kvstore.entry_digest(entry),
            }
            cfg = entry.config
            if cfg is not None and cfg.tx is not None:
                data["tx_id"] = cfg.tx.tx_id
                if cfg.kind == ConfigKind.MERGE_TX:
                    data["decision"] = cfg.tx.decision.value
                    data["decider"] = cfg.tx.deciding_cluster
            if cfg is not None and cfg.kind == ConfigKind.SPLIT_NEW:
                data["subs"] = {sub.cluster_id: list(sub.members)
                                for sub in cfg.subclusters}
            self.emit("append", data)
        if entry.kind == PayloadKind.CONFIG:
            self._apply_config_on_receipt(entry, replay=replay)

    def _truncate_from(self, index: int) -> None:
        """Drop entries at and beyond `index`, reverting any wait-free
        config application that rode on them."""
        assert index > self.base_index
        while self.pending and self.pending[-1].index >= index:
            p = self.pending.pop()
            self.election_rule = p.prev_election
            self.commit_rule = p.prev_commit
            self.joint_cfg = p.prev_joint
            self.split_new = p.prev_split_new
            self.proposal_range = p.prev_range
            self._refresh_cfg_digest()
            self.emit("config_revert", {"index": p.index,
                                        "cfg_kind": p.config.kind.value})
        count = self.last_index() - index + 1
        del self.log[len(self.log) - count:]
        del self._chain[len(self._chain) - count:]
        self.store.persist_truncate(index)
        self.last_config_index = 0
        for e in reversed(self.log):
            if e.kind == PayloadKind.CONFIG:
                self.last_config_index = e.index
                break
        self.emit("truncate", {"from_index": index,
                               "was_leader": self.role == Role.LEADER})

    def _reset_log(self, first: LogEntry, base_kv: dict[str, str]) -> None:
        """Restart the log so `first` is its only entry, treated as
        committed, on top of `base_kv` as the pre-log state.  The base stamp
        records the era so recovery and pull serving know where this log's
        numbering began."""
        base_at = EpochTerm(self.log_era_epoch, 0)
        blob = wire.encode_snapshot(self.cluster_id, self.key_range, 0,
                                    base_at.packed(), base_kv)
        self.store.persist_reset(blob)
        self.kv = dict(base_kv)
        self.base_index = 0
        self.base_at = base_at
        self.log = []
        self._chain = [self._base_seed()]
        self.pending = []
        self.emit("reset_log", {"first_index": first.index,
                                "first_at": first.at.packed(),
                                "state": kvstore.state_digest(base_kv)})
        self.commit_index = 0
        self.applied_index = 0
        self._append_entry(first)
        self.commit_index = first.index
        self.applied_index = first.index
        self.pending = []
        self.last_config_index = first.index if first.kind == PayloadKind.CONFIG else 0

    # ------------------------------------------------------------------
    # Wait-free configuration application

    def _apply_config_on_receipt(self, entry: LogEntry, replay: bool = False) -> None:
        cfg = entry.config
        assert cfg is not None
        self.pending.append(PendingConfig(
            index=entry.index, config=cfg,
            prev_election=self.election_rule, prev_commit=self.commit_rule,
            prev_joint=self.joint_cfg, prev_split_new=self.split_new,
            prev_range=self.proposal_range,
        ))
        if cfg.kind == ConfigKind.SPLIT_JOINT:
            self.election_rule = cfg.election_quorum
            self.joint_cfg = cfg
            self.joint_committed = False
            if "epoch_bump_at_receipt" in self.defects:
                self.current = EpochTerm(self.current.epoch + 1, self.current.term)
        elif cfg.kind == ConfigKind.SPLIT_NEW:
            own = cfg.subcluster_of(self.id)
            if own is not None:
                self.commit_rule = QuorumRule.majority(own.members)
                self.proposal_range = own.key_range
                if "shrink_election_at_leave" in self.defects:
                    self.election_rule = QuorumRule.majority(own.members)
                if "epoch_bump_at_receipt" in self.defects:
                    self.current = EpochTerm(self.current.epoch + 1, self.current.term)
            self.split_new = (entry.index, cfg)
        elif cfg.kind in (ConfigKind.NEW_QUORUM, ConfigKind.STABLE):
            self.election_rule = cfg.election_quorum
            self.commit_rule = cfg.commit_quorum
        # MERGE_TX / MERGE_ABORT / MERGE_NEW change nothing at receipt;
        # they take effect once committed.
        self._refresh_cfg_digest()
        if not replay:
            self.emit("config_rx", {
                "index": entry.index, "cfg_kind": cfg.kind.value,
                "config_id": cfg.config_id,
                "election": self.election_rule.describe(),
                "commit": self.commit_rule.describe(),
            })

    # ------------------------------------------------------------------
    # Preconditions

    def check_preconditions(self, proposed: ClusterConfig) -> Optional[str]:
        """First violated precondition label, or None when clear."""
        if "allow_second_config" not in self.defects:
            if self._uncommitted_config_present():
                return "P1"
            if self.joint_cfg is not None or self.split_new is not None:
                return "P1"  # split in flight: only its completion may follow
            if self._open_txs():
                return "P1"  # open merge transaction
        if not quorum_overlap_guaranteed(self.commit_rule, proposed.commit_quorum):
            return "P2'"
        if not self.committed_in_term:
            return "P3"
        return None

    def _uncommitted_config_present(self) -> bool:
        return any(p.index > self.commit_index for p in self.pending)

    # ------------------------------------------------------------------
    # Elections

    def _election_targets(self) -> list[NodeId]:
        return [n for n in self.election_rule.members() if n != self.id]

    def start_election(self, immediate: bool = False) -> None:
        if self.role == Role.RETIRED or self.exchange is not None:
            return
        self.current = self.current.next_term()
        self.voted_for = self.id
        self.committed_in_term = False
        self._persist_meta()
        self.role = Role.CANDIDATE
        self.votes = {self.id}
        self._arm_election_timer()
        self.emit("role", {"role": "candidate", "cluster": self.cluster_id,
                           "epoch": self.current.epoch, "term": self.current.term,
                           "via": "designated" if immediate else "timeout"})
        self.emit("election_start", {
            "cluster": self.cluster_id, "epoch": self.current.epoch,
            "term": self.current.term, "rule": self.election_rule.describe(),
            "joint": self.joint_cfg is not None,
            "leave_pending": self.split_new is not None,
        })
        req = m.VoteRequest(candidate=self.id, at=self.current.packed(),
                            last_index=self.last_index(),
                            last_at=self.stamp_at(self.last_index()).packed())
        for peer in self._election_targets():
            self.send(peer, req)
        self._check_election_won()

    def _check_election_won(self) -> None:
        if self.role == Role.CANDIDATE and self.election_rule.satisfied(self.votes):
            self._become_leader()

    def _become_leader(self) -> None:
        self.role = Role.LEADER
        self.deadlines.pop("election", None)
        self.deadlines["heartbeat"] = self.now
        self.leader_hint = self.id
        last = self.last_index()
        self.next_index = {p: last + 1 for p in self._replication_targets()}
        self.match_index = {p: 0 for p in self._replication_targets()}
        self.last_ack = {}
        self.install_progress = {}
        self.emit("role", {"role": "leader", "cluster": self.cluster_id,
                           "epoch": self.current.epoch, "term": self.current.term,
                           "via": "election"})
        self._register_naming()
        self._rebuild_tx_state()
        # Seed the term with a no-op: establishes P3 and flushes commits.
        self._propose_entry(LogEntry.noop(last + 1, self.current))

    def _replication_targets(self) -> list[NodeId]:
        peers: set = set(self.members)
        if self.joint_cfg is not None:
            peers |= set(self.joint_cfg.members)
        for p in self.pending:
            # Same-cluster reconfigurations extend replication (joining and
            # leaving nodes are fed until the change commits); merge configs
            # never do -- each cluster commits its own copy of those.
            if p.config.kind in (ConfigKind.NEW_QUORUM, ConfigKind.STABLE):
                peers |= set(p.config.members)
                peers |= set(p.config.final_members)
        peers |= set(self.election_rule.members())
        peers.discard(self.id)
        return sorted(peers)

    def handle_vote_request(self, req: m.VoteRequest) -> None:
        if self.role == Role.RETIRED:
            return
        req_at = EpochTerm.unpack(req.at)
        if self.current.epoch > req_at.epoch:
            # The requester missed a completed reconfiguration; point it at
            # committed data instead of consuming a vote.
            self.send(req.candidate, m.VoteResponse(
                voter=self.id, at=self.current.packed(), verdict=m.VoteVerdict.PULL))
            self.emit("vote", {"candidate": req.candidate, "verdict": "pull"})
            return
        if req_at.packed() > self.current.packed():
            self._adopt(req_at)
        if req_at.packed() < self.current.packed():
            verdict = m.VoteVerdict.DENY
        elif self.voted_for not in (None, req.candidate):
            verdict = m.VoteVerdict.DENY
        else:
            mine = (self.stamp_at(self.last_index()).packed(), self.last_index())
            verdict = (m.VoteVerdict.GRANT
                       if (req.last_at, req.last_index) >= mine
                       else m.VoteVerdict.DENY)
        if verdict == m.VoteVerdict.GRANT:
            self.voted_for = req.candidate
            self._persist_meta()
            self._arm_election_timer()
        self.emit("vote", {"candidate": req.candidate, "verdict": verdict.name.lower()})
        self.send(req.candidate, m.VoteResponse(
            voter=self.id, at=self.current.packed(), verdict=verdict))

    def handle_vote_response(self, resp: m.VoteResponse) -> None:
        if self.role == Role.RETIRED:
            return
        resp_at = EpochTerm.unpack(resp.at)
        if resp.verdict == m.VoteVerdict.PULL:
            if self.role == Role.CANDIDATE:
                self._become_follower()
            self._start_pull(first_source=resp.voter, goal_epoch=resp_at.epoch)
            return
        if resp_at.packed() > self.current.packed():
            self._adopt(resp_at)
            return
        if self.role != Role.CANDIDATE or resp.at != self.current.packed():
            return
        if resp.verdict == m.VoteVerdict.GRANT:
            self.votes.add(resp.voter)
            self._check_election_won()

    # ------------------------------------------------------------------
    # Log replication

    def _heartbeat(self) -> None:
        self.deadlines["heartbeat"] = self.now + self.timing.heartbeat
        for peer in self._replication_targets():
            self._send_append(peer)

    def _send_append(self, peer: NodeId) -> None:
        if peer in self.install_progress:
            self._send_install_chunk(peer)
            return
        ni = self.next_index.get(peer)
        if ni is None:
            ni = self.last_index() + 1
            self.next_index[peer] = ni
            self.match_index.setdefault(peer, 0)
        if ni <= self.base_index:
            self._begin_install(peer)
            return
        cap = self.last_index()
        if self.split_new is not None:
            k, cfg = self.split_new
            own = cfg.subcluster_of(self.id)
            if own is not None and peer not in own.members:
                # Members outside our subcluster only receive the shared
                # prefix up through the completion entry.
                cap = min(cap, k)
                if ni > cap:
                    return
        entries = []
        idx = ni
        while idx <= cap and len(entries) < self.timing.max_append_entries:
            entries.append(self.entry_at(idx))
            idx += 1
        self.send(peer, m.AppendEntries(
            leader=self.id, at=self.current.packed(),
            prev_index=ni - 1, prev_at=self.stamp_at(ni - 1).packed(),
            entries=tuple(entries), leader_commit=self.commit_index,
        ))

    def handle_append(self, msg: m.AppendEntries) -> None:
        if self.role == Role.RETIRED or self.exchange is not None:
            return
        msg_at = EpochTerm.unpack(msg.at)
        if msg_at.packed() < self.current.packed():
            self.send(msg.leader, m.AppendResponse(
                follower=self.id, at=self.current.packed(), ok=False,
                conflict_index=self.last_index() + 1))
            return
        self._adopt(msg_at)
        if self.role == Role.CANDIDATE:
            self._become_follower()
        self.leader_hint = msg.leader
        self._arm_election_timer()

        if EpochTerm.unpack(msg.prev_at).epoch < self.log_era_epoch \
                or (msg.entries and msg.entries[0].at.epoch < self.log_era_epoch):
            # The sender's log predates our log's era (its numbering refers
            # to a generation we already compacted); never regress to it.
            return
        if msg.prev_index > self.last_index():
            self.send(msg.leader, m.AppendResponse(
                follower=self.id, at=self.current.packed(), ok=False,
                conflict_index=self.last_index() + 1))
            return
        if msg.prev_index < self.base_index:
            # Stale probe below our base: everything there is already final.
            self.send(msg.leader, m.AppendResponse(
                follower=self.id, at=self.current.packed(), ok=True,
                match_index=self.base_index))
            return
        if self.stamp_at(msg.prev_index) != EpochTerm.unpack(msg.prev_at):
            if msg.prev_index <= self.commit_index:
                # Divergence below our commit point: we come from an older
                # cluster generation; request a snapshot, never truncate.
                self.send(msg.leader, m.AppendResponse(
                    follower=self.id, at=self.current.packed(), ok=False,
                    conflict_index=0))
                return
            conflict_at = self.stamp_at(msg.prev_index)
            hint = msg.prev_index
            while hint > self.base_index + 1 and self.stamp_at(hint - 1) == conflict_at:
                hint -= 1
            self.send(msg.leader, m.AppendResponse(
                follower=self.id, at=self.current.packed(), ok=False,
                conflict_index=hint))
            return

        last_new = msg.prev_index
        for entry in msg.entries:
            existing = self.entry_at(entry.index)
            if existing is not None:
                if existing.at == entry.at:
                    last_new = entry.index
                    continue
                if entry.index <= self.commit_index:
                    self.send(msg.leader, m.AppendResponse(
                        follower=self.id, at=self.current.packed(), ok=False,
                        conflict_index=0))
                    return
                self._truncate_from(entry.index)
            if entry.index == self.last_index() + 1:
                self._append_entry(entry)
                last_new = entry.index
        if msg.leader_commit > self.commit_index:
            self._advance_commit_to(min(msg.leader_commit, last_new))
        if self.exchange is not None:
            return  # the commit advance kicked off a merge data exchange
        self.send(msg.leader, m.AppendResponse(
            follower=self.id, at=self.current.packed(), ok=True,
            match_index=last_new))

    def handle_append_response(self, resp: m.AppendResponse) -> None:
        if self.role != Role.LEADER:
            return
        resp_at = EpochTerm.unpack(resp.at)
        if resp_at.packed() > self.current.packed():
            self._adopt(resp_at)
            return
        if resp.at != self.current.packed():
            return
        peer = resp.follower
        if peer not in self.next_index:
            return
        self.last_ack[peer] = self.now
        if resp.ok:
            if resp.match_index > self.match_index.get(peer, 0):
                self.match_index[peer] = resp.match_index
            self.next_index[peer] = max(self.next_index.get(peer, 1),
                                        resp.match_index + 1)
            self.install_progress.pop(peer, None)
            self._advance_commit()
            if self.role == Role.LEADER and self.exchange is None \
                    and self.next_index.get(peer, 1) <= self.last_index():
                self._send_append(peer)
        else:
            if resp.conflict_index == 0:
                self._begin_install(peer)
                return
            self.next_index[peer] = max(
                self.base_index + 1,
                min(resp.conflict_index, self.next_index.get(peer, 2) - 1))
            self._send_append(peer)

    # ------------------------------------------------------------------
    # Commit

    def _commit_rule_for(self, index: int) -> QuorumRule:
        # Entries before a pending split-completion entry still commit under
        # the pre-completion rule; at and past it, the proposer's own
        # subcluster majority decides.
        if self.split_new is not None:
            k, _cfg = self.split_new
            if index < k:
                for p in self.pending:
                    if p.index == k:
                        return p.prev_commit
        return self.commit_rule

    def _advance_commit(self) -> None:
        if self.role != Role.LEADER:
            return
        for idx in range(self.last_index(), self.commit_index, -1):
            entry = self.entry_at(idx)
            if entry is None or entry.at != self.current:
                continue
            voters = {self.id} | {p for p, mi in self.match_index.items() if mi >= idx}
            if self._commit_rule_for(idx).satisfied(voters):
                self.emit("direct_commit", {"index": idx, "at": entry.at.packed()})
                self._advance_commit_to(idx)
                return

    def _advance_commit_to(self, index: int) -> None:
        if index <= self.commit_index:
            return
        self.commit_index = index
        self.emit("commit", {"index": index})
        self._apply_loop()

    def _apply_loop(self) -> None:
        while self.applied_index < self.commit_index:
            idx = self.applied_index + 1
            entry = self.entry_at(idx)
            if entry is None:
                break
            self.applied_index = idx
            kvstore.apply_entry(self.kv, entry)
            data = {"index": idx, "digest": kvstore.entry_digest(entry)}
            if entry.kind == PayloadKind.COMMAND:
                try:
                    cmd = kvstore.decode_command(entry.command)
                    data["key"] = cmd["key"]
                    data["cmd"] = ("put" if cmd["op"] == kvstore.CMD_PUT
                                   else "delete")
                    data["value"] = cmd.get("value", "")
                except wire.WireError:
                    pass
            self.emit("apply", data)
            if entry.at == self.current:
                self.committed_in_term = True
            while self.pending and self.pending[0].index <= self.commit_index:
                self.pending.pop(0)
            if entry.kind == PayloadKind.CONFIG:
                self._on_config_committed(idx, entry.config)
                if self.exchange is not None or self.base_index >= idx:
                    return  # entered data exchange or the log was reset
            if self.role == Role.LEADER:
                ack = self.pending_acks.pop(idx, None)
                if ack is not None:
                    reply_to, op_id = ack
                    self.send(reply_to, ("kv_ok", op_id, None))
        if self.role == Role.LEADER:
            self._leader_duties()

    # ------------------------------------------------------------------
    # Config commit effects

    def _on_config_committed(self, index: int, cfg: ClusterConfig) -> None:
        if cfg.kind == ConfigKind.SPLIT_JOINT:
            self.joint_committed = True
            self.committed_cfg = cfg
            self.committed_cfg_index = index
            self.emit("split_joint_committed", {"index": index,
                                                "config_id": cfg.config_id})
        elif cfg.kind == ConfigKind.SPLIT_NEW:
            self._finish_split(index, cfg)
        elif cfg.kind == ConfigKind.NEW_QUORUM:
            self.committed_cfg = cfg
            self.committed_cfg_index = index
            self.emit("member_intermediate_committed", {
                "index": index, "quorum": cfg.quorum_size,
                "voters": list(cfg.members)})
        elif cfg.kind == ConfigKind.STABLE:
            self._finish_membership(index, cfg)
        elif cfg.kind == ConfigKind.MERGE_TX:
            self._on_tx_committed(index, cfg)
        else:
            self._on_tx_resolved(index, cfg)

    def _finish_membership(self, index: int, cfg: ClusterConfig) -> None:
        prev_members = self.members
        self.members = cfg.members
        self.cluster_id = cfg.cluster_id  # joining nodes adopt the identity
        self.key_range = cfg.key_range
        self.proposal_range = cfg.key_range
        self.election_rule = cfg.election_quorum
        self.commit_rule = cfg.commit_quorum
        self.committed_cfg = cfg
        self.committed_cfg_index = index
        self._refresh_cfg_digest()
        if set(prev_members) != set(cfg.members):
            self.history.add(HistoryRecord(
                kind="membership", config_id=cfg.config_id,
                epoch=self.current.epoch,
                from_clusters=[{"cluster_id": self.cluster_id,
                                "members": sorted(prev_members),
                                "range": range_to_obj(self.key_range)}],
                to_clusters=[{"cluster_id": self.cluster_id,
                              "members": sorted(cfg.members),
                              "range": range_to_obj(self.key_range)}],
                involved=sorted(set(prev_members) | set(cfg.members)),
                completed={self.id: True},
            ))
            self._persist_history()
            self.emit("member_change_done", {"index": index,
                                             "members": list(cfg.members),
                                             "config_id": cfg.config_id})
        self._emit_view()
        if self.id not in cfg.members:
            self._retire("removed")
            return
        if self.role == Role.LEADER:
            for gone in set(self.next_index) - set(self._replication_targets()):
                self.next_index.pop(gone, None)
                self.match_index.pop(gone, None)
            self._register_naming()

    # ---- split completion

    def _finish_split(self, index: int, cfg: ClusterConfig,
                      recovering: bool = False) -> None:
        own = cfg.subcluster_of(self.id)
        assert own is not None, f"{self.id} not in any subcluster of {cfg.config_id}"
        entry_at = self.stamp_at(index)
        done_epoch = entry_at.epoch + 1
        old_members = self.members
        old_cluster = self.cluster_id
        old_range = self.key_range
        was_leader = self.role == Role.LEADER

        # State cut: keep our range, park the rest durably so subclusters
        # that must restore from us later can still get their data.
        residue = {k: v for k, v in self.kv.items()
                   if not own.key_range.contains(k)}
        self.kv = {k: v for k, v in self.kv.items() if own.key_range.contains(k)}
        self.store.save_residue(cfg.config_id, wire.encode_snapshot(
            old_cluster, old_range, max(index - 1, 0),
            self.stamp_at(index - 1).packed() if index - 1 >= self.base_index else 0,
            residue))

        self.history.add(HistoryRecord(
            kind="split", config_id=cfg.config_id, epoch=done_epoch,
            from_clusters=[{"cluster_id": old_cluster,
                            "members": sorted(old_members),
                            "range": range_to_obj(old_range)}],
            to_clusters=[{"cluster_id": s.cluster_id, "members": list(s.members),
                          "range": range_to_obj(s.key_range)}
                         for s in cfg.subclusters],
            involved=sorted(old_members),
            completed={self.id: True},
        ))
        self._persist_history()

        self.cluster_id = own.cluster_id
        self.members = own.members
        self.key_range = own.key_range
        self.proposal_range = own.key_range
        rule = QuorumRule.majority(own.members)
        self.election_rule = rule
        self.commit_rule = rule
        self.joint_cfg = None
        self.joint_committed = False
        self.split_new = None
        self.committed_cfg = stable_config(f"{cfg.config_id}/{own.cluster_id}",
                                           own.cluster_id, own.members,
                                           own.key_range)
        self.committed_cfg_index = index
        self._refresh_cfg_digest()

        self.cluster_epoch = done_epoch
        new_at = EpochTerm(done_epoch, entry_at.term)
        if new_at.packed() > self.current.packed():
            self.current = new_at
            self._persist_meta()
        self.pull_active = False
        self.deadlines.pop("pull", None)
        self.emit("split_new_committed", {"index": index, "config_id": cfg.config_id,
                                          "cluster": self.cluster_id})
        self.emit("epoch_bumped", {"epoch": self.current.epoch,
                                   "cluster": self.cluster_id, "via": "split"})
        self._emit_view()
        if recovering:
            return
        if was_leader:
            # Keep leading our own subcluster; shed outside peers and tell
            # every pre-split member that the completion committed.
            self.emit("role", {"role": "leader", "cluster": self.cluster_id,
                               "epoch": self.current.epoch, "term": self.current.term,
                               "via": "carry"})
            targets = self._replication_targets()
            self.next_index = {p: self.next_index.get(p, self.last_index() + 1)
                               for p in targets}
            self.match_index = {p: self.match_index.get(p, 0) for p in targets}
            self.notify_msg = m.CommitNotify(
                sender=self.id, old_cluster_id=old_cluster,
                config_id=cfg.config_id, commit_index=index)
            self.notify_targets = {p: 0 for p in old_members if p != self.id}
            self._retry_notify()  # first round goes out with the completion
            self._register_naming()
        else:
            self._arm_election_timer()
            if self.id == min(self.members) and self.leader_hint not in self.members:
                # Designated first election of the subcluster: skip the
                # timeout wait.
                self.start_election(immediate=True)

    def _handle_commit_notify(self, msg: m.CommitNotify) -> None:
        if msg.is_ack:
            if self.role == Role.LEADER:
                self.notify_targets.pop(msg.sender, None)
            rec = self.history.find(msg.config_id)
            if rec is not None:
                rec.completed[msg.sender] = True
                self._persist_history()
                self._gc_history()
            return
        if self.role == Role.RETIRED:
            return
        rec = self.history.find(msg.config_id)
        if rec is not None and rec.completed.get(self.id):
            self.send(msg.sender, m.CommitNotify(
                sender=self.id, old_cluster_id=msg.old_cluster_id,
                config_id=msg.config_id, commit_index=msg.commit_index,
                is_ack=True))
            return
        if self.split_new is not None and self.split_new[1].config_id == msg.config_id:
            idx, _ = self.split_new
            self._advance_commit_to(max(self.commit_index, idx))
            self.send(msg.sender, m.CommitNotify(
                sender=self.id, old_cluster_id=msg.old_cluster_id,
                config_id=msg.config_id, commit_index=msg.commit_index,
                is_ack=True))
            return
        # We lack the completion entry: fetch committed data from the sender.
        self._start_pull(first_source=msg.sender,
                         goal_epoch=self.current.epoch + 1)

    def _retry_notify(self) -> None:
        if self.notify_msg is None or not self.notify_targets:
            self.deadlines.pop("notify", None)
            return
        gave_up = [p for p, tries in self.notify_targets.items()
                   if tries >= self.timing.notify_attempts]
        for p in gave_up:
            self.notify_targets.pop(p)
            self.emit("notify_gave_up", {"peer": p})
        for p in sorted(self.notify_targets):
            self.notify_targets[p] += 1
            self.send(p, self.notify_msg)
        if self.notify_targets:
            self.deadlines["notify"] = self.now + self.timing.notify_retry
        else:
            self.deadlines.pop("notify", None)

    # ---- pull-based recovery

    def _start_pull(self, first_source: NodeId, goal_epoch: int) -> None:
        if self.exchange is not None or self.role == Role.RETIRED:
            return
        if self.current.epoch >= goal_epoch:
            return
        if self.pull_active and goal_epoch <= self.pull_goal_epoch:
            return
        sources = [first_source]
        for peer in self._election_targets():
            if peer not in sources:
                sources.append(peer)
        self.pull_sources = sources
        self.pull_active = True
        self.pull_goal_epoch = goal_epoch
        self.emit("pull_started", {"source": first_source,
                                   "goal_epoch": goal_epoch})
        self._send_pull()

    def _send_pull(self) -> None:
        if not self.pull_active or not self.pull_sources:
            self.pull_active = False
            self.deadlines.pop("pull", None)
            return
        self.send(self.pull_sources[0],
                  m.PullRequest(sender=self.id, from_index=self.commit_index,
                                epoch=self.current.epoch))
        self.deadlines["pull"] = self.now + self.timing.pull_retry

    def _rotate_pull_source(self) -> None:
        if self.pull_sources:
            self.pull_sources.append(self.pull_sources.pop(0))

    def handle_pull_request(self, req: m.PullRequest) -> None:
        # Serving committed data is safe in any role, including retired.
        if req.from_index < self.base_index or req.epoch < self.log_era_epoch:
            residue = b""
            rec = self._split_record_for(req.sender)
            if rec is not None:
                blob = self.store.load_residue(rec.config_id)
                if blob is not None:
                    residue = blob
            self.send(req.sender, m.PullResponse(
                sender=self.id, status=m.PullStatus.HISTORY,
                history_blob=self.history.encode(), residue_blob=residue,
                source_commit=self.commit_index))
            self.emit("pull_served", {"peer": req.sender, "mode": "history"})
            return
        limit = self.commit_index
        if "pull_uncommitted" in self.defects:
            limit = self.last_index()
        if limit <= req.from_index:
            self.send(req.sender, m.PullResponse(
                sender=self.id, status=m.PullStatus.NOT_READY,
                source_commit=self.commit_index))
            return
        last = min(limit, req.from_index + self.timing.pull_chunk)
        entries = tuple(self.entry_at(i)
                        for i in range(req.from_index + 1, last + 1))
        self.send(req.sender, m.PullResponse(
            sender=self.id, status=m.PullStatus.ENTRIES,
            from_index=req.from_index, entries=entries,
            source_commit=self.commit_index))
        self.emit("pull_served", {"peer": req.sender, "mode": "entries",
                                  "from": req.from_index, "to": last,
                                  "source_commit": self.commit_index})

    def _split_record_for(self, peer: NodeId) -> Optional[HistoryRecord]:
        for rec in reversed(self.history.records):
            if rec.kind == "split" and peer in rec.involved:
                return rec
        return None

    def handle_pull_response(self, resp: m.PullResponse) -> None:
        if not self.pull_active or self.role == Role.RETIRED:
            return
        if resp.status == m.PullStatus.NOT_READY:
            self._rotate_pull_source()
            self.deadlines["pull"] = self.now + self.timing.pull_retry
            return
        if resp.status == m.PullStatus.HISTORY:
            self._restore_from_history(resp)
            return
        progressed = False
        for entry in resp.entries:
            if entry.index <= self.commit_index:
                continue
            existing = self.entry_at(entry.index)
            if existing is not None:
                if existing.at == entry.at:
                    self._advance_commit_to(entry.index)
                    progressed = True
                    continue
                self._truncate_from(entry.index)
            if entry.index != self.last_index() + 1:
                break
            self._append_entry(entry)
            progressed = True
            self._advance_commit_to(entry.index)
            if not self.pull_active or self.current.epoch >= self.pull_goal_epoch:
                # A completion applied mid-batch; the rest belongs to the
                # source's new era.
                break
        if self.current.epoch >= self.pull_goal_epoch or self.exchange is not None:
            self.pull_active = False
            self.deadlines.pop("pull", None)
            return
        if progressed or resp.source_commit > self.commit_index:
            self._send_pull()
        else:
            self._rotate_pull_source()
            self.deadlines["pull"] = self.now + self.timing.pull_retry

    def _restore_from_history(self, resp: m.PullResponse) -> None:
        try:
            records = ReconfigHistory.decode(resp.history_blob)
        except Exception:
            self._rotate_pull_source()
            self.deadlines["pull"] = self.now + self.timing.pull_retry
            return
        for rec in records.records:
            if rec.kind == "split" and self.id in rec.involved \
                    and rec.epoch > self.current.epoch:
                for sub in rec.to_clusters:
                    if self.id in sub["members"]:
                        self._install_split_restore(rec, sub, resp.residue_blob)
                        return
            if rec.kind == "merge" and self.id in rec.involved:
                merged = rec.to_clusters[0]
                if self.id in merged["members"]:
                    # We are a member of the merged cluster; its leader will
                    # push the snapshot once it contacts us.
                    self.pull_active = False
                    self.deadlines.pop("pull", None)
                    return
                self._retire("not_resumed")
                return
        self._rotate_pull_source()
        self.deadlines["pull"] = self.now + self.timing.pull_retry

    def _install_split_restore(self, rec: HistoryRecord, sub: dict,
                               residue_blob: bytes) -> None:
        """Peers that completed our split have compacted the shared log; we
        rebuild from the history record plus the state residue they kept."""
        my_range = range_from_obj(sub["range"])
        state = {k: v for k, v in self.kv.items() if my_range.contains(k)}
        if residue_blob:
            snap = wire.decode_snapshot(residue_blob)
            for k, v in snap["kv"].items():
                if my_range.contains(k):
                    state[k] = v
        if residue_blob:
            self.store.save_residue(rec.config_id, residue_blob)
        members = tuple(sorted(sub["members"]))
        self.cluster_id = sub["cluster_id"]
        self.members = members
        self.key_range = my_range
        self.proposal_range = my_range
        rule = QuorumRule.majority(members)
        self.election_rule = rule
        self.commit_rule = rule
        self.joint_cfg = None
        self.joint_committed = False
        self.split_new = None
        marker = stable_config(f"{rec.config_id}/restore/{self.cluster_id}",
                               self.cluster_id, members, my_range)
        at = EpochTerm(rec.epoch, 0)
        if at.packed() > self.current.packed():
            self.current = at
            self._persist_meta()
        self.log_era_epoch = rec.epoch
        self.cluster_epoch = rec.epoch
        self._reset_log(LogEntry.cfg(1, EpochTerm(rec.epoch, 0), marker), state)
        self.committed_cfg = marker
        self.committed_cfg_index = 1
        self._refresh_cfg_digest()
        self.history.add(HistoryRecord(
            kind=rec.kind, config_id=rec.config_id, epoch=rec.epoch,
            from_clusters=rec.from_clusters, to_clusters=rec.to_clusters,
            involved=rec.involved, completed={self.id: True}, tx_id=rec.tx_id))
        self._persist_history()
        source = self.pull_sources[0] if self.pull_sources else None
        self.pull_active = False
        self.deadlines.pop("pull", None)
        self.emit("split_new_committed", {"index": 1, "config_id": rec.config_id,
                                          "cluster": self.cluster_id,
                                          "via": "history_restore"})
        self.emit("epoch_bumped", {"epoch": self.current.epoch,
                                   "cluster": self.cluster_id, "via": "split"})
        self._emit_view()
        if source is not None:
            self.send(source, m.CommitNotify(
                sender=self.id, old_cluster_id="", config_id=rec.config_id,
                commit_index=1, is_ack=True))
        self._arm_election_timer()
        if self.id == min(self.members) and self.leader_hint not in self.members:
            self.start_election(immediate=True)

    def _gc_history(self) -> None:
        removed = self.history.gc()
        for rec in removed:
            self.emit("history_gc", {"config_id": rec.config_id})
        if removed:
            self._persist_history()

    # ------------------------------------------------------------------
    # Leader duties: continue in-flight reconfigurations

    def _leader_duties(self) -> None:
        if self.role != Role.LEADER:
            return
        no_later_cfg = self.last_config_index <= self.committed_cfg_index
        if self.committed_cfg.kind == ConfigKind.SPLIT_JOINT and no_later_cfg \
                and self.joint_committed:
            self._propose_split_completion()
        elif self.committed_cfg.kind == ConfigKind.NEW_QUORUM and no_later_cfg:
            final = self.committed_cfg.final_members
            cfg = stable_config(self._next_config_id(), self.cluster_id,
                                final, self.key_range)
            self._propose_config_entry(cfg)
            self.emit("resize_proposed", {"members": list(final)})
        self._tx_step()

    def _propose_split_completion(self) -> None:
        joint = self.joint_cfg if self.joint_cfg is not None else self.committed_cfg
        cfg = derive_completion(joint, self._next_config_id())
        self._propose_config_entry(cfg)
        self.emit("split_leave_proposed", {"config_id": cfg.config_id})

    def _next_config_id(self) -> str:
        return f"cfg:{self.cluster_id}:{self.current.packed()}:{self.last_index() + 1}"

    # ------------------------------------------------------------------
    # Proposals

    def _propose_entry(self, entry: LogEntry) -> None:
        self._append_entry(entry)
        self._advance_commit()
        if self.role != Role.LEADER or self.exchange is not None:
            return
        for peer in self._replication_targets():
            self._send_append(peer)

    def _propose_config_entry(self, cfg: ClusterConfig) -> None:
        self._propose_entry(LogEntry.cfg(self.last_index() + 1, self.current, cfg))

    def propose_command(self, data: bytes, reply_to: str = "",
                        op_id: str = "") -> tuple[bool, str]:
        if self.role != Role.LEADER:
            return False, "not_leader"
        if self.exchange is not None or self._merge_new_in_log():
            return False, "busy"
        idx = self.last_index() + 1
        if reply_to:
            self.pending_acks[idx] = (reply_to, op_id)
        self._propose_entry(LogEntry.cmd(idx, self.current, data))
        return True, ""

    def _merge_new_in_log(self) -> bool:
        if any(p.config.kind in (ConfigKind.MERGE_NEW, ConfigKind.MERGE_ABORT)
               for p in self.pending):
            return True
        return any(t.resolution_committed and t.resolution is not None
                   and t.resolution.kind == ConfigKind.MERGE_NEW
                   for t in self.txs.values())

    def propose_reconfig(self, cfg: ClusterConfig) -> tuple[bool, str]:
        """Gate a brand-new reconfiguration through the preconditions."""
        if self.role != Role.LEADER:
            return False, "not_leader"
        violated = self.check_preconditions(cfg)
        if violated is not None:
            self.emit("reconfig_rejected", {"why": violated,
                                            "cfg_kind": cfg.kind.value})
            return False, violated
        self._propose_config_entry(cfg)
        return True, ""

    # ------------------------------------------------------------------
    # Admin surface

    def admin_split(self, subs: list[SubCluster]) -> tuple[bool, str]:
        """Enter joint mode for a split; the completion follows on its own
        once the joint entry commits."""
        if self.role != Role.LEADER:
            return False, "not_leader"
        base = stable_config("base", self.cluster_id, self.members, self.key_range)
        try:
            cfg = split_joint_config(self._next_config_id(), base, tuple(subs))
        except ConfigError as exc:
            return False, str(exc)
        ok, why = self.propose_reconfig(cfg)
        if ok and "split_new_without_joint_commit" in self.defects:
            self._propose_split_completion()
        return ok, why

    def admin_member_change(self, add: list[NodeId],
                            remove: list[NodeId]) -> tuple[bool, str]:
        """One membership-change stage: add or remove the given nodes via a
        single intermediate (or a direct step when majorities already
        overlap).  Oversized removals are rejected; stage them."""
        if self.role != Role.LEADER:
            return False, "not_leader"
        if add and remove:
            return False, "mixed add/remove not supported; run two changes"
        if remove and not remove_allowed(len(self.members), len(remove)):
            return False, (f"cannot remove {len(remove)} nodes from "
                           f"{len(self.members)}: removals must stay below the "
                           f"quorum ({majority_of(len(self.members))}); stage the change")
        target = (set(self.members) | set(add)) - set(remove)
        try:
            plan = plan_membership_change(self.members, target)
        except PlanError as exc:
            return False, str(exc)
        if plan.staged:
            return False, "removal requires staging"
        from .membership import plan_step_config
        cfg = plan_step_config(self._next_config_id(), self.cluster_id,
                               self.key_range, plan.steps[0])
        return self.propose_reconfig(cfg)

    def admin_resize_quorum(self) -> tuple[bool, str]:
        """Reset a committed fixed-quorum intermediate to a plain majority;
        normally automatic, exposed for operators."""
        if self.role != Role.LEADER:
            return False, "not_leader"
        if self.committed_cfg.kind != ConfigKind.NEW_QUORUM:
            return False, "no intermediate quorum to resize"
        if self.last_config_index > self.committed_cfg_index:
            return False, "resize already in flight"
        cfg = stable_config(self._next_config_id(), self.cluster_id,
                            self.committed_cfg.final_members, self.key_range)
        return self.propose_reconfig(cfg)

    def admin_request(self, cmd: dict, reply_to: str, op_id: str) -> None:
        """Admin verbs arriving over the (simulated or in-process) client
        channel; reconfiguration verbs answer after proposing, not after
        committing: completion shows up in `status` and the trace."""
        verb = cmd.get("verb")
        if verb == "status":
            self.send(reply_to, ("admin_ok", op_id, self.status()))
            return
        if self.role != Role.LEADER:
            self.send(reply_to, ("admin_err", op_id,
                                 {"why": "not_leader",
                                  "leader_hint": self.leader_hint or ""}))
            return
        if verb == "split":
            subs = [SubCluster(s["cluster_id"], tuple(s["members"]),
                               range_from_obj(s["range"]))
                    for s in cmd["subclusters"]]
            ok, why = self.admin_split(subs)
        elif verb == "merge":
            ok, why = self.start_merge(cmd["clusters"],
                                       cmd.get("resume_members", []))
        elif verb == "member_add":
            ok, why = self.admin_member_change(list(cmd["nodes"]), [])
        elif verb == "member_remove":
            ok, why = self.admin_member_change([], list(cmd["nodes"]))
        elif verb == "resize_quorum":
            ok, why = self.admin_resize_quorum()
        else:
            ok, why = False, f"unknown verb {verb!r}"
        if ok:
            self.send(reply_to, ("admin_ok", op_id, {"detail": why}))
        else:
            self.send(reply_to, ("admin_err", op_id, {"why": why}))

    # ------------------------------------------------------------------
    # Merge: 2PC overlay

    def start_merge(self, cluster_ids: list[str],
                    resume_members: list[NodeId]) -> tuple[bool, str]:
        """Operator entry point on the coordinating cluster's leader; the
        participant roster is resolved through the naming registry."""
        if self.role != Role.LEADER:
            return False, "not_leader"
        if self._open_txs():
            return False, "P1"
        if not self.committed_in_term:
            # Defer until this term's no-op commits; the merge timer retries.
            self._merge_request = {"clusters": list(cluster_ids),
                                   "resume_members": list(resume_members)}
            self.deadlines["merge"] = self.now + self.timing.merge_retry
            return True, "pending"
        if self.registry is None:
            return False, "no naming registry available"
        parts = []
        for cid in cluster_ids:
            if cid == self.cluster_id:
                parts.append(Participant(self.cluster_id, self.members,
                                         self.key_range, self.cluster_epoch))
                continue
            entry = self.registry.get(cid)
            if entry is None:
                return False, f"unknown cluster {cid!r}"
            parts.append(Participant(entry.cluster_id, entry.members,
                                     entry.key_range, entry.epoch))
        if self.cluster_id not in {p.cluster_id for p in parts}:
            return False, "coordinator must be among the merging clusters"
        self._tx_seq += 1
        tx_id = f"{self.cluster_id}:{self.current.packed()}:{self._tx_seq}"
        try:
            tx = merge_mod.build_tx(tx_id, self.cluster_id, parts, resume_members)
            cfg = merge_tx_config(self._next_config_id(), self.committed_cfg,
                                  merge_mod.with_decision(tx, self.cluster_id, True))
        except ConfigError as exc:
            return False, str(exc)
        ok, why = self.propose_reconfig(cfg)
        if ok:
            self.emit("merge_started", {
                "tx_id": tx_id, "participants": sorted(p.cluster_id for p in parts)})
        return ok, why

    def _open_txs(self) -> list[TxState]:
        return [t for _, t in sorted(self.txs.items())
                if not t.resolution_committed]

    def _rebuild_tx_state(self) -> None:
        """After taking leadership, resume merge transactions from their
        last committed stage."""
        found: dict[str, TxState] = {}
        for e in self.log:
            if e.kind != PayloadKind.CONFIG or e.index > self.commit_index:
                continue
            cfg = e.config
            if cfg.kind == ConfigKind.MERGE_TX:
                rec = cfg.tx
                state = found.setdefault(rec.tx_id,
                                         TxState(record=rec, tx_index=e.index))
                state.responses[rec.deciding_cluster] = (
                    rec.decision.value == "ok", self.cluster_epoch)
            elif cfg.kind in (ConfigKind.MERGE_NEW, ConfigKind.MERGE_ABORT):
                state = found.get(cfg.tx.tx_id)
                if state is not None:
                    state.resolution = cfg
                    state.resolution_committed = True
        for tx_id, state in found.items():
            if self.history.find_tx(tx_id) is not None:
                continue  # finished long ago
            self.txs.setdefault(tx_id, state)
        if self.txs:
            self.deadlines["merge"] = self.now + self.timing.merge_retry

    def _on_tx_committed(self, index: int, cfg: ClusterConfig) -> None:
        rec = cfg.tx
        self.committed_cfg = cfg
        self.committed_cfg_index = index
        state = self.txs.get(rec.tx_id)
        if state is None:
            state = TxState(record=rec, tx_index=index)
            self.txs[rec.tx_id] = state
        if self._pending_coordinator_hint:
            state.coordinator_hint = self._pending_coordinator_hint
            self._pending_coordinator_hint = None
        state.responses[rec.deciding_cluster] = (
            rec.decision.value == "ok", self.cluster_epoch)
        self.emit("tx_decided", {"tx_id": rec.tx_id, "cluster": self.cluster_id,
                                 "decision": rec.decision.value})
        if self.role == Role.LEADER:
            if rec.coordinator == self.cluster_id:
                self.emit("tx_prepared_local", {"tx_id": rec.tx_id})
            else:
                self._send_prepare_response(state)
            self.deadlines["merge"] = self.now + self.timing.merge_retry

    def _coordinator_target(self, state: TxState) -> Optional[NodeId]:
        if state.coordinator_hint is not None:
            return state.coordinator_hint
        coord = state.record.participant(state.record.coordinator)
        if coord is None:
            return None
        rotation = (self.now // self.timing.merge_retry) % len(coord.members)
        return sorted(coord.members)[rotation]

    def _send_prepare_response(self, state: TxState) -> None:
        rec = state.record
        target = self._coordinator_target(state)
        if target is None or target == self.id:
            return
        self.send(target, m.MergePrepareResponse(
            sender=self.id, tx_id=rec.tx_id, cluster_id=self.cluster_id,
            ok=rec.decision.value == "ok", epoch=self.cluster_epoch))

    def _on_tx_resolved(self, index: int, cfg: ClusterConfig) -> None:
        rec = cfg.tx
        if cfg.kind == ConfigKind.MERGE_NEW and cfg.cluster_id == self.cluster_id:
            # Already resumed (or snapshot-installed) into the merged
            # cluster; adopt identity from the entry and move on.
            self._adopt_merged_identity(index, cfg)
            return
        state = self.txs.get(rec.tx_id)
        if state is None:
            state = TxState(record=rec, tx_index=index)
            self.txs[rec.tx_id] = state
        state.resolution = cfg
        state.resolution_committed = True
        self.committed_cfg = cfg
        self.committed_cfg_index = index
        if cfg.kind == ConfigKind.MERGE_ABORT:
            self.emit("tx_aborted", {"tx_id": rec.tx_id, "cluster": self.cluster_id})
            self.history.add(HistoryRecord(
                kind="merge_abort", config_id=cfg.config_id,
                epoch=self.cluster_epoch, from_clusters=[], to_clusters=[],
                involved=[], completed={self.id: True}, tx_id=rec.tx_id))
            self._persist_history()
            # Service resumes untouched under the prior configuration.
            self.committed_cfg = stable_config(
                f"{cfg.config_id}/stable", self.cluster_id, self.members,
                self.key_range)
            if self.role == Role.LEADER:
                if rec.coordinator == self.cluster_id:
                    self.deadlines["merge"] = self.now + self.timing.merge_retry
                else:
                    self._send_commit_ack(state)
            return
        self.emit("tx_committed", {"tx_id": rec.tx_id, "cluster": self.cluster_id,
                                   "epoch_new": cfg.epoch_new})
        if self.role == Role.LEADER and rec.coordinator != self.cluster_id:
            # Respond to the coordinator after our commit, before applying.
            self._send_commit_ack(state)
        if self.role == Role.LEADER and rec.coordinator == self.cluster_id \
                and not self._all_participants_acked(state):
            state.defer_exchange = True
            self.deadlines["merge"] = self.now + self.timing.merge_retry
            return
        self._begin_exchange(cfg)

    def _adopt_merged_identity(self, index: int, cfg: ClusterConfig) -> None:
        self.cluster_epoch = cfg.epoch_new
        self.members = cfg.election_quorum.members()
        self.key_range = cfg.key_range
        self.proposal_range = cfg.key_range
        self.election_rule = cfg.election_quorum
        self.commit_rule = cfg.commit_quorum
        self.txs = {}
        self.committed_cfg = stable_config(f"{cfg.config_id}/resumed",
                                           cfg.cluster_id, self.members,
                                           cfg.key_range)
        self.committed_cfg_index = index
        self._refresh_cfg_digest()
        rec = self.history.find(cfg.config_id)
        if rec is None or not rec.completed.get(self.id):
            self.history.add(HistoryRecord(
                kind="merge", config_id=cfg.config_id, epoch=cfg.epoch_new,
                from_clusters=[{"cluster_id": p.cluster_id,
                                "members": list(p.members),
                                "range": range_to_obj(p.key_range)}
                               for p in cfg.tx.participants],
                to_clusters=[{"cluster_id": cfg.cluster_id,
                              "members": sorted(self.members),
                              "range": range_to_obj(cfg.key_range)}],
                involved=sorted(cfg.tx.all_members()),
                completed={self.id: True},
                tx_id=cfg.tx.tx_id))
            self._persist_history()
        self._emit_view()
        if self.id not in self.members:
            self._retire("not_resumed")

    def _send_commit_ack(self, state: TxState) -> None:
        target = self._coordinator_target(state)
        if target is None or target == self.id:
            return
        self.send(target, m.MergeCommitAck(
            sender=self.id, tx_id=state.record.tx_id,
            cluster_id=self.cluster_id))

    def _all_participants_acked(self, state: TxState) -> bool:
        rec = state.record
        others = {p.cluster_id for p in rec.participants
                  if p.cluster_id != rec.coordinator}
        return others <= state.acks

    def _tx_step(self) -> None:
        """Per-transaction driver steps; runs off the merge timer and after
        commits."""
        for tx_id in sorted(self.txs):
            state = self.txs[tx_id]
            if state.resolution_committed and state.resolution is not None \
                    and state.resolution.kind == ConfigKind.MERGE_NEW \
                    and self.exchange is None and self.role != Role.LEADER:
                # Deposed mid-merge: stop driving the 2PC and catch up with
                # the data exchange ourselves.
                self._begin_exchange(state.resolution)
                return
        if self.role != Role.LEADER:
            return
        if self._merge_request is not None and self.committed_in_term:
            req = self._merge_request
            self._merge_request = None
            self.start_merge(req["clusters"], req["resume_members"])
            return
        for tx_id in sorted(self.txs):
            self._tx_step_one(self.txs[tx_id])

    def _tx_step_one(self, state: TxState) -> None:
        rec = state.record
        if rec.coordinator != self.cluster_id:
            if not state.resolution_committed \
                    and state.tx_index <= self.commit_index:
                # Participant inquiry: re-offer our decision until resolved.
                self._send_prepare_response(state)
                self.deadlines["merge"] = self.now + self.timing.merge_retry
            return
        if state.resolution is None:
            missing = [p for p in rec.participants
                       if p.cluster_id != self.cluster_id
                       and p.cluster_id not in state.responses]
            if missing:
                for p in missing:
                    rotation = (self.now // self.timing.merge_retry) % len(p.members)
                    self.send(sorted(p.members)[rotation], m.MergePrepare(
                        sender=self.id, coordinator_cluster=self.cluster_id,
                        tx_blob=wire.encode_tx(rec)))
                self.deadlines["merge"] = self.now + self.timing.merge_retry
                return
            if self._uncommitted_config_present():
                self.deadlines["merge"] = self.now + self.timing.merge_retry
                return
            all_ok = all(ok for ok, _ in state.responses.values())
            if all_ok:
                epochs = [ep for _, ep in state.responses.values()]
                cfg = merge_new_config(self._next_config_id(), self.committed_cfg,
                                       rec, merge_mod.epoch_for_merge(epochs))
                self.emit("tx_prepared", {"tx_id": rec.tx_id,
                                          "epoch_new": cfg.epoch_new})
            else:
                cfg = merge_abort_config(self._next_config_id(),
                                         self.committed_cfg, rec)
            self._propose_config_entry(cfg)
            self.deadlines["merge"] = self.now + self.timing.merge_retry
            return
        if not state.resolution_committed:
            self.deadlines["merge"] = self.now + self.timing.merge_retry
            return
        unacked = [p for p in rec.participants
                   if p.cluster_id != self.cluster_id
                   and p.cluster_id not in state.acks]
        for p in unacked:
            rotation = (self.now // self.timing.merge_retry) % len(p.members)
            self.send(sorted(p.members)[rotation], m.MergeCommit(
                sender=self.id, tx_id=rec.tx_id, config=state.resolution))
        if unacked:
            self.deadlines["merge"] = self.now + self.timing.merge_retry
        elif state.defer_exchange \
                and state.resolution.kind == ConfigKind.MERGE_NEW:
            state.defer_exchange = False
            self._begin_exchange(state.resolution)

    def _forward_to_leader(self, msg) -> None:
        """Pass a cluster-level 2PC message to our leader, hop-bounded."""
        import dataclasses
        if msg.ttl <= 0:
            return
        if self.leader_hint and self.leader_hint != self.id:
            self.send(self.leader_hint, dataclasses.replace(msg, ttl=msg.ttl - 1))

    def handle_merge_prepare(self, msg: m.MergePrepare) -> None:
        if self.role == Role.RETIRED:
            return
        if self.role != Role.LEADER:
            self._forward_to_leader(msg)
            return
        rec = wire.decode_tx(msg.tx_blob)
        hist = self.history.find_tx(rec.tx_id)
        if hist is not None:
            self.send(msg.sender, m.MergePrepareResponse(
                sender=self.id, tx_id=rec.tx_id, cluster_id=self.cluster_id,
                ok=self._tx_decision_was_ok(rec.tx_id), epoch=self.cluster_epoch))
            return
        state = self.txs.get(rec.tx_id)
        if state is not None and "nonidempotent_2pc" not in self.defects:
            state.coordinator_hint = msg.sender
            if state.tx_index <= self.commit_index:
                self._send_prepare_response(state)
            return
        if self._tx_entry_in_log(rec.tx_id) is not None \
                and "nonidempotent_2pc" not in self.defects:
            return  # decision proposed, not yet committed; respond then
        if not self.committed_in_term:
            return  # P3 pending; the coordinator retries after our no-op
        ok = not self._uncommitted_config_present() \
            and self.joint_cfg is None and self.split_new is None \
            and not self._open_txs()
        self._propose_decision(rec, ok=ok, hint=msg.sender)

    def _tx_entry_in_log(self, tx_id: str) -> Optional[LogEntry]:
        for e in reversed(self.log):
            if e.kind == PayloadKind.CONFIG and e.config.kind == ConfigKind.MERGE_TX \
                    and e.config.tx.tx_id == tx_id:
                return e
        return None

    def _propose_decision(self, rec: MergeTxRecord, ok: bool,
                          hint: Optional[NodeId] = None) -> None:
        try:
            cfg = merge_tx_config(self._next_config_id(), self.committed_cfg,
                                  merge_mod.with_decision(rec, self.cluster_id, ok))
        except ConfigError:
            return
        self._pending_coordinator_hint = hint
        self._propose_config_entry(cfg)

    def _tx_decision_was_ok(self, tx_id: str) -> bool:
        for e in self.log:
            if e.kind == PayloadKind.CONFIG and e.config.kind == ConfigKind.MERGE_TX \
                    and e.config.tx.tx_id == tx_id:
                return e.config.tx.decision.value == "ok"
        rec = self.history.find_tx(tx_id)
        return rec is not None and rec.kind == "merge"

    def handle_merge_prepare_response(self, msg: m.MergePrepareResponse) -> None:
        state = self.txs.get(msg.tx_id)
        if self.role != Role.LEADER or state is None:
            # Possibly addressed to a stale coordinator member: pass it on.
            if self.role == Role.FOLLOWER:
                self._forward_to_leader(msg)
            return
        if msg.cluster_id not in state.responses:
            self.emit("tx_vote", {"tx_id": msg.tx_id, "cluster": msg.cluster_id,
                                  "ok": msg.ok})
        state.responses[msg.cluster_id] = (msg.ok, msg.epoch)
        self._tx_step()

    def handle_merge_commit(self, msg: m.MergeCommit) -> None:
        if self.role == Role.RETIRED:
            self.send(msg.sender, m.MergeCommitAck(
                sender=self.id, tx_id=msg.tx_id, cluster_id=self.cluster_id))
            return
        hist = self.history.find_tx(msg.tx_id)
        if hist is not None:
            # The transaction already carried this node through; just re-ack.
            cluster = self.cluster_id
            for p in msg.config.tx.participants:
                if self.id in p.members:
                    cluster = p.cluster_id
            self.send(msg.sender, m.MergeCommitAck(
                sender=self.id, tx_id=msg.tx_id, cluster_id=cluster))
            return
        if self.role != Role.LEADER:
            self._forward_to_leader(msg)
            return
        state = self.txs.get(msg.tx_id)
        if state is not None and state.resolution_committed:
            self.send(msg.sender, m.MergeCommitAck(
                sender=self.id, tx_id=msg.tx_id, cluster_id=self.cluster_id))
            return
        if state is None:
            return  # our decision entry is not committed yet; sender retries
        state.coordinator_hint = msg.sender
        already = any(
            e.kind == PayloadKind.CONFIG
            and e.config.kind in (ConfigKind.MERGE_NEW, ConfigKind.MERGE_ABORT)
            and e.config.tx.tx_id == msg.tx_id
            for e in self.log)
        if not already and not self._uncommitted_config_present():
            self._propose_config_entry(msg.config)

    def handle_merge_commit_ack(self, msg: m.MergeCommitAck) -> None:
        state = self.txs.get(msg.tx_id)
        if self.role != Role.LEADER or state is None:
            if self.role == Role.FOLLOWER:
                self._forward_to_leader(msg)
            return
        if msg.cluster_id not in state.acks:
            self.emit("tx_ack", {"tx_id": msg.tx_id, "cluster": msg.cluster_id})
        state.acks.add(msg.cluster_id)
        self._tx_step()

    # ------------------------------------------------------------------
    # Merge: data exchange

    def _begin_exchange(self, cfg: ClusterConfig) -> None:
        rec = cfg.tx
        own = rec.participant(self.cluster_id)
        if own is None:
            return
        done = self.history.find(cfg.config_id)
        if done is not None and done.completed.get(self.id):
            return
        cut = self.committed_cfg_index  # index of the merge config entry
        snap_kv = {k: v for k, v in self.kv.items() if own.key_range.contains(k)}
        last_included = max(cut - 1, 0)
        blob = wire.encode_snapshot(
            self.cluster_id, own.key_range, last_included,
            self.stamp_at(last_included).packed()
            if last_included >= self.base_index else 0,
            snap_kv)
        self.store.save_snapshot(f"xfer-{rec.tx_id}-{self.cluster_id}", blob)
        others = [p.cluster_id for p in rec.participants
                  if p.cluster_id != self.cluster_id]
        if self.role == Role.LEADER:
            # Final push: let followers learn the merge entry committed so
            # they can start their own exchange rather than wait for a
            # snapshot install from the merged cluster's first leader.
            for peer in self._replication_targets():
                self._send_append(peer)
            self.emit("role", {"role": "follower", "cluster": self.cluster_id,
                               "epoch": self.current.epoch,
                               "term": self.current.term, "via": "exchange"})
            self.role = Role.FOLLOWER
        self.exchange = Exchange(config=cfg,
                                 snaps={self.cluster_id: blob},
                                 pending=sorted(others))
        self.deadlines.clear()
        self.emit("exchange_started", {"tx_id": rec.tx_id,
                                       "awaiting": list(self.exchange.pending)})
        self._request_snapshots()

    def _request_snapshots(self) -> None:
        ex = self.exchange
        if ex is None:
            return
        if not ex.pending:
            self._resume_merged()
            return
        rec = ex.config.tx
        for cluster in list(ex.pending):
            part = rec.participant(cluster)
            rot = ex.source_rotation.get(cluster, 0)
            ex.source_rotation[cluster] = rot + 1
            target = sorted(part.members)[rot % len(part.members)]
            xfer = ex.xfers.setdefault(cluster, merge_mod.SnapshotXfer())
            self.send(target, m.SnapshotRequest(
                sender=self.id, tx_id=rec.tx_id, cluster_id=cluster,
                offset=xfer.next_offset()))
        self.deadlines["snapshot"] = self.now + self.timing.snapshot_retry

    def handle_snapshot_request(self, msg: m.SnapshotRequest) -> None:
        if self.exchange is not None and msg.cluster_id in self.exchange.snaps:
            blob = self.exchange.snaps[msg.cluster_id]
        else:
            blob = self.store.load_snapshot(f"xfer-{msg.tx_id}-{msg.cluster_id}")
        if blob is None:
            self.send(msg.sender, m.SnapshotChunk(
                sender=self.id, tx_id=msg.tx_id, cluster_id=msg.cluster_id,
                ready=False))
            return
        data, total, checksum = merge_mod.chunk_of(
            blob, msg.offset, self.timing.snapshot_chunk)
        self.send(msg.sender, m.SnapshotChunk(
            sender=self.id, tx_id=msg.tx_id, cluster_id=msg.cluster_id,
            ready=True, offset=msg.offset, total=total, data=data,
            checksum=checksum))

    def handle_snapshot_chunk(self, msg: m.SnapshotChunk) -> None:
        ex = self.exchange
        if ex is None or msg.cluster_id not in ex.pending or not msg.ready:
            return
        if ex.config.tx.tx_id != msg.tx_id:
            return
        xfer = ex.xfers.setdefault(msg.cluster_id, merge_mod.SnapshotXfer())
        xfer.add(msg.offset, msg.data, msg.total, msg.checksum)
        blob = xfer.complete()
        if blob is None:
            if xfer.next_offset() < xfer.total:
                self.send(msg.sender, m.SnapshotRequest(
                    sender=self.id, tx_id=msg.tx_id, cluster_id=msg.cluster_id,
                    offset=xfer.next_offset()))
            return
        ex.snaps[msg.cluster_id] = blob
        ex.pending.remove(msg.cluster_id)
        self.emit("snapshot_exchanged", {"tx_id": msg.tx_id,
                                         "from_cluster": msg.cluster_id})
        if not ex.pending:
            self._resume_merged()

    def _resume_merged(self) -> None:
        ex = self.exchange
        assert ex is not None
        cfg = ex.config
        rec = cfg.tx
        merged_kv, merged_range = merge_mod.union_snapshots(
            ex.snaps[c] for c in sorted(ex.snaps))
        resumed = cfg.election_quorum.members()

        self.exchange = None
        self.cluster_id = cfg.cluster_id
        self.members = tuple(resumed)
        self.key_range = merged_range
        self.proposal_range = merged_range
        self.election_rule = cfg.election_quorum
        self.commit_rule = cfg.commit_quorum
        self.joint_cfg = None
        self.joint_committed = False
        self.split_new = None
        self.txs = {}
        self.committed_cfg = stable_config(f"{cfg.config_id}/resumed",
                                           cfg.cluster_id, resumed, merged_range)
        self._refresh_cfg_digest()

        first_at = EpochTerm(cfg.epoch_new, 0)
        if "merge_resume_old_stamp" in self.defects:
            first_at = self.current
        self.log_era_epoch = cfg.epoch_new
        self.cluster_epoch = cfg.epoch_new
        self._reset_log(LogEntry.cfg(1, first_at, cfg), merged_kv)
        self.committed_cfg_index = 1
        if first_at.packed() > self.current.packed():
            self.current = first_at
            self._persist_meta()
        self.history.add(HistoryRecord(
            kind="merge", config_id=cfg.config_id, epoch=cfg.epoch_new,
            from_clusters=[{"cluster_id": p.cluster_id, "members": list(p.members),
                            "range": range_to_obj(p.key_range)}
                           for p in rec.participants],
            to_clusters=[{"cluster_id": cfg.cluster_id, "members": list(resumed),
                          "range": range_to_obj(merged_range)}],
            involved=sorted(rec.all_members()),
            completed={self.id: True},
            tx_id=rec.tx_id))
        self._persist_history()
        self.emit("merged_resumed", {"tx_id": rec.tx_id, "cluster": self.cluster_id,
                                     "epoch": cfg.epoch_new,
                                     "state": kvstore.state_digest(self.kv)})
        self._emit_view()
        self._register_naming()
        if self.id not in resumed:
            self._retire("not_resumed")
            return
        self.role = Role.FOLLOWER
        self.leader_hint = None
        self._arm_election_timer()
        if self.id == min(resumed):
            self.start_election(immediate=True)

    # ------------------------------------------------------------------
    # Snapshot install (merged-cluster catch-up)

    def _begin_install(self, peer: NodeId) -> None:
        if peer not in self.install_progress:
            self.install_progress[peer] = 0
        self._send_install_chunk(peer)

    def _send_install_chunk(self, peer: NodeId) -> None:
        blob = self.store.load_snapshot("base")
        if blob is None:
            blob = wire.encode_snapshot(self.cluster_id, self.key_range,
                                        self.base_index, self.base_at.packed(), {})
        offset = self.install_progress.get(peer, 0)
        data, total, checksum = merge_mod.chunk_of(blob, offset,
                                                   self.timing.snapshot_chunk)
        done = offset + len(data) >= total
        self.send(peer, m.InstallSnapshot(
            leader=self.id, at=self.current.packed(), offset=offset,
            total=total, data=data, checksum=checksum, done=done))
        if done:
            self.install_progress.pop(peer, None)
            self.next_index[peer] = self.base_index + 1
        else:
            self.install_progress[peer] = offset + len(data)

    def handle_install_snapshot(self, msg: m.InstallSnapshot) -> None:
        if self.role == Role.RETIRED:
            return
        msg_at = EpochTerm.unpack(msg.at)
        if msg_at.packed() < self.current.packed():
            return
        self._adopt(msg_at)
        if self.role == Role.CANDIDATE:
            self._become_follower()
        self.leader_hint = msg.leader
        self._arm_election_timer()
        if self.install is None or self.install.leader != msg.leader:
            self.install = InstallState(leader=msg.leader)
        self.install.xfer.add(msg.offset, msg.data, msg.total, msg.checksum)
        if not msg.done:
            return
        blob = self.install.xfer.complete()
        self.install = None
        if blob is None:
            return  # incomplete; the leader's next probe restarts transfer
        snap = wire.decode_snapshot(blob)
        if EpochTerm.unpack(snap["last_at"]).epoch < self.log_era_epoch:
            return  # never install a base from an older generation
        self.exchange = None
        self.pull_active = False
        self.txs = {}
        self.cluster_id = snap["source_cluster"]
        self.key_range = snap["key_range"]
        self.proposal_range = snap["key_range"]
        self.kv = dict(snap["kv"])
        self.base_index = snap["last_index"]
        self.base_at = EpochTerm.unpack(snap["last_at"])
        self.log_era_epoch = max(self.base_at.epoch, self.log_era_epoch)
        self.cluster_epoch = max(self.base_at.epoch, self.cluster_epoch)
        self.log = []
        self._chain = [self._base_seed()]
        self.commit_index = self.base_index
        self.applied_index = self.base_index
        self.pending = []
        self.joint_cfg = None
        self.joint_committed = False
        self.split_new = None
        self.last_config_index = 0
        self.store.persist_reset(blob)
        self._refresh_cfg_digest()
        self.emit("install", {"leader": msg.leader, "base": self.base_index,
                              "cluster": self.cluster_id,
                              "state": kvstore.state_digest(self.kv)})
        self._emit_view()
        self.send(msg.leader, m.AppendResponse(
            follower=self.id, at=self.current.packed(), ok=True,
            match_index=self.base_index))

    # ------------------------------------------------------------------
    # Naming

    def _register_naming(self) -> None:
        if self.registry is not None:
            self.registry.register(self.cluster_id, self.members, self.key_range,
                                   self.cluster_epoch)

    # ------------------------------------------------------------------
    # Client surface

    def client_request(self, op: dict, reply_to: str, op_id: str) -> None:
        """One KV client operation; replies are
        ('kv_ok' | 'kv_redirect' | 'kv_error', op_id, payload) tuples."""
        if self.role == Role.RETIRED:
            self.send(reply_to, ("kv_redirect", op_id,
                                 {"reason": "not_my_range", "cluster": "",
                                  "leader": ""}))
            return
        if self.role != Role.LEADER:
            self.send(reply_to, ("kv_redirect", op_id,
                                 {"reason": "not_leader",
                                  "cluster": self.cluster_id,
                                  "leader": self.leader_hint or ""}))
            return
        if self.exchange is not None or self._merge_new_in_log():
            self.send(reply_to, ("kv_redirect", op_id,
                                 {"reason": "busy", "cluster": self.cluster_id,
                                  "leader": self.id}))
            return
        key = op["key"]
        if not self.proposal_range.contains(key):
            self.send(reply_to, ("kv_redirect", op_id,
                                 {"reason": "not_my_range",
                                  "cluster": self.cluster_id, "leader": ""}))
            return
        kind = op["op"]
        if kind == wire.KV_GET:
            if not self._read_gate_open():
                self.send(reply_to, ("kv_redirect", op_id,
                                     {"reason": "busy", "cluster": self.cluster_id,
                                      "leader": self.id}))
                return
            self.send(reply_to, ("kv_ok", op_id, self.kv.get(key)))
            return
        if kind == wire.KV_PUT:
            data = kvstore.encode_command(kvstore.CMD_PUT, key, op.get("value", ""))
        elif kind == wire.KV_DELETE:
            data = kvstore.encode_command(kvstore.CMD_DELETE, key)
        else:
            self.send(reply_to, ("kv_error", op_id, "bad_op"))
            return
        ok, _why = self.propose_command(data, reply_to, op_id)
        if not ok:
            self.send(reply_to, ("kv_redirect", op_id,
                                 {"reason": "busy", "cluster": self.cluster_id,
                                  "leader": self.id}))

    def _read_gate_open(self) -> bool:
        """Leader-local reads are allowed only while the leader has heard
        from a commit quorum within one minimum election timeout; a deposed
        leader therefore stops answering before any successor can commit."""
        horizon = self.now - self.timing.election_min
        fresh = {self.id} | {p for p, t in self.last_ack.items() if t >= horizon}
        return self.commit_rule.satisfied(fresh)

    def status(self) -> dict:
        return {
            "node": self.id,
            "cluster": self.cluster_id,
            "role": self.role.value,
            "epoch": self.current.epoch,
            "term": self.current.term,
            "commit_index": self.commit_index,
            "applied_index": self.applied_index,
            "last_index": self.last_index(),
            "members": list(self.members),
            "range": str(self.key_range),
            "config_kind": self.committed_cfg.kind.value,
            "election_rule": self.election_rule.describe(),
            "commit_rule": self.commit_rule.describe(),
            "leader_hint": self.leader_hint or "",
            "keys": len(self.kv),
        }

    # ------------------------------------------------------------------
    # Drivers

    def on_message(self, msg: object, now: int) -> None:
        self.now = max(self.now, now)
        if isinstance(msg, tuple):
            kind = msg[0]
            if kind == "client":
                _, op, reply_to, op_id = msg
                self.client_request(op, reply_to, op_id)
            elif kind == "admin":
                _, cmd, reply_to, op_id = msg
                self.admin_request(cmd, reply_to, op_id)
            return
        if isinstance(msg, m.VoteRequest):
            self.handle_vote_request(msg)
        elif isinstance(msg, m.VoteResponse):
            self.handle_vote_response(msg)
        elif isinstance(msg, m.AppendEntries):
            self.handle_append(msg)
        elif isinstance(msg, m.AppendResponse):
            self.handle_append_response(msg)
        elif isinstance(msg, m.CommitNotify):
            self._handle_commit_notify(msg)
        elif isinstance(msg, m.PullRequest):
            self.handle_pull_request(msg)
        elif isinstance(msg, m.PullResponse):
            self.handle_pull_response(msg)
        elif isinstance(msg, m.MergePrepare):
            self.handle_merge_prepare(msg)
        elif isinstance(msg, m.MergePrepareResponse):
            self.handle_merge_prepare_response(msg)
        elif isinstance(msg, m.MergeCommit):
            self.handle_merge_commit(msg)
        elif isinstance(msg, m.MergeCommitAck):
            self.handle_merge_commit_ack(msg)
        elif isinstance(msg, m.SnapshotRequest):
            self.handle_snapshot_request(msg)
        elif isinstance(msg, m.SnapshotChunk):
            self.handle_snapshot_chunk(msg)
        elif isinstance(msg, m.InstallSnapshot):
            self.handle_install_snapshot(msg)

    def on_tick(self, now: int) -> None:
        self.now = max(self.now, now)
        due = sorted(name for name, t in self.deadlines.items() if t <= self.now)
        for name in due:
            if self.deadlines.get(name, self.now + 1) > self.now:
                continue  # re-armed by an earlier timer this tick
            self.deadlines.pop(name, None)
            if name == "election":
                if self.role in (Role.FOLLOWER, Role.CANDIDATE):
                    self.start_election()
            elif name == "heartbeat":
                if self.role == Role.LEADER:
                    self._heartbeat()
            elif name == "pull":
                if self.pull_active:
                    self._rotate_pull_source()
                    self._send_pull()
            elif name == "merge":
                self._tx_step()
            elif name == "notify":
                self._retry_notify()
            elif name == "snapshot":
                self._request_snapshots()
