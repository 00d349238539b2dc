"""Trace oracles: replay a trace's events into shadow state and check the
protocol's safety properties, completely independently of the engine.

Checks, by family:

* state machine safety -- two nodes never apply different entries at the
  same (cluster era, epoch, index);
* election safety -- at most one leader per (cluster, epoch, term);
* leader append-only -- a leader never truncates its own log, and nobody
  truncates committed entries;
* log matching -- nodes of the same cluster era that share an
  (index, stamp) pair agree on everything at or below it;
* leader completeness -- a new leader's log contains every entry directly
  committed in lower terms of its cluster era;
* log consistency -- entries committed at the same (cluster era, epoch,
  index) are identical;
* cluster well-formedness -- two nodes at the same epoch belong to
  identical or disjoint clusters;
* reconfiguration discipline -- wait-free entries follow the protocol's
  phase rules: a split's completion only after its joint entry commits, no
  second in-flight config, joint elections while a completion is pending,
  epoch bumps only after completion evidence exists, exactly two config
  entries per split, pull serves only committed entries, merge decisions
  are write-once per cluster, and one transaction never resolves both ways.

``check_liveness`` verifies scripted operations complete within their
bounds; ``check_linearizable_reads`` validates every read against the
committed value timeline of its key.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .scenario import MS, Scenario
from .trace import Trace, TraceEvent

SPLIT_KINDS = ("split_joint", "split_new")
MERGE_KINDS = ("merge_tx", "merge_new", "merge_abort")


@dataclass
class Violation:
    check: str
    node: str
    t: int
    detail: str

    def to_obj(self) -> dict:
        return {"check": self.check, "node": self.node, "t": self.t,
                "detail": self.detail}

    def __str__(self) -> str:
        return f"[{self.check}] t={self.t} node={self.node}: {self.detail}"


@dataclass
class _Entry:
    index: int
    at: int
    digest: str
    payload: str
    cfg_kind: str = ""
    tx_id: str = ""
    decision: str = ""
    decider: str = ""
    subs: Optional[dict] = None  # split completion: subcluster -> members


@dataclass
class _Shadow:
    node: str
    cluster: str = ""
    epoch: int = 0          # epoch of the cluster era, not the running term
    members: tuple = ()
    role: str = "follower"
    log: list = field(default_factory=list)
    base: int = 0
    commit: int = 0
    last_committed_cfg: str = ""       # kind of the latest committed config
    open_tx: str = ""                  # unresolved merge transaction id
    view_reset_ok: bool = False        # one view regression allowed post-restart

    def entry(self, index: int) -> Optional[_Entry]:
        pos = index - self.base - 1
        if 0 <= pos < len(self.log):
            return self.log[pos]
        return None

    def last_index(self) -> int:
        return self.base + len(self.log)


class TraceChecker:
    def __init__(self, trace: Trace) -> None:
        self.trace = trace
        self.violations: list[Violation] = []
        self.shadows: dict[str, _Shadow] = {}
        self.leaders: dict[tuple, str] = {}
        self.applied: dict[tuple, str] = {}
        self.committed: dict[tuple, str] = {}
        self.direct: list[tuple] = []  # (cluster, epoch, term, index, digest)
        self.tx_resolutions: dict[str, set] = {}
        self.tx_decisions: dict[tuple, str] = {}
        self.max_completed_epoch = 0

    def flag(self, check: str, ev: TraceEvent, detail: str) -> None:
        self.violations.append(Violation(check=check, node=ev.node, t=ev.t,
                                         detail=detail))

    def shadow(self, node: str) -> _Shadow:
        if node not in self.shadows:
            self.shadows[node] = _Shadow(node=node)
        return self.shadows[node]

    # ------------------------------------------------------------------

    def run(self) -> list[Violation]:
        for ev in self.trace.events:
            handler = getattr(self, f"_on_{ev.kind}", None)
            if handler is not None:
                handler(ev)
        self._check_log_matching_final()
        return self.violations

    # ------------------------------------------------------------------
    # View and role tracking

    def _on_cluster_view(self, ev: TraceEvent) -> None:
        s = self.shadow(ev.node)
        s.cluster = ev.data["cluster"]
        if ev.data["epoch"] < s.epoch and not s.view_reset_ok:
            self.flag("epoch_monotonic", ev,
                      f"cluster era epoch went {s.epoch} -> {ev.data['epoch']}")
        s.view_reset_ok = False
        s.epoch = ev.data["epoch"]
        s.members = tuple(ev.data["members"])
        self._check_well_formed(ev)

    def _check_well_formed(self, ev: TraceEvent) -> None:
        s = self.shadow(ev.node)
        mine = set(s.members)
        # Placeholder views of not-yet-joined spare nodes are not clusters.
        if not mine or s.cluster.startswith("spare:"):
            return
        for other in self.shadows.values():
            if other.node == s.node or other.epoch != s.epoch:
                continue
            theirs = set(other.members)
            if not theirs or other.cluster == s.cluster \
                    or other.cluster.startswith("spare:"):
                continue
            if mine & theirs:
                self.flag("cluster_well_formedness", ev,
                          f"{s.node}@{s.cluster} and {other.node}@{other.cluster} "
                          f"share members {sorted(mine & theirs)} at epoch {s.epoch}")

    def _on_role(self, ev: TraceEvent) -> None:
        s = self.shadow(ev.node)
        s.role = ev.data["role"]
        epoch, term = ev.data["epoch"], ev.data["term"]
        via = ev.data.get("via", "")
        if ev.data["role"] == "leader":
            key = (ev.data["cluster"], epoch, term)
            holder = self.leaders.get(key)
            if holder is not None and holder != ev.node:
                self.flag("election_safety", ev,
                          f"{ev.node} and {holder} both lead {key}")
            self.leaders[key] = ev.node
            if via == "election":
                self._check_leader_completeness(ev, s, epoch, term)
        if epoch > s.epoch and epoch > self.max_completed_epoch:
            self.flag("premature_epoch", ev,
                      f"{ev.node} runs at epoch {epoch} before any "
                      f"reconfiguration completed that epoch")

    def _check_leader_completeness(self, ev: TraceEvent, s: _Shadow,
                                   epoch: int, term: int) -> None:
        for (cluster, d_epoch, d_term, index, digest) in self.direct:
            if cluster != s.cluster or d_epoch != s.epoch or d_term >= term:
                continue
            entry = s.entry(index)
            if entry is None and index <= s.base:
                continue  # compacted away by a later-era reset
            if entry is None or entry.digest != digest:
                self.flag("leader_completeness", ev,
                          f"leader {ev.node} of ({cluster},{epoch},t{term}) lacks "
                          f"directly committed entry {index} from t{d_term}")

    def _on_election_start(self, ev: TraceEvent) -> None:
        if ev.data.get("joint") or ev.data.get("leave_pending"):
            if not ev.data.get("rule", "").startswith("joint"):
                self.flag("joint_election_rule", ev,
                          f"{ev.node} campaigned with {ev.data.get('rule')} "
                          f"while the split is still in flight")
        epoch = ev.data["epoch"]
        s = self.shadow(ev.node)
        if epoch > s.epoch and epoch > self.max_completed_epoch:
            self.flag("premature_epoch", ev,
                      f"candidate {ev.node} at epoch {epoch} before any "
                      f"completion reached it")

    # ------------------------------------------------------------------
    # Log events

    def _on_append(self, ev: TraceEvent) -> None:
        s = self.shadow(ev.node)
        d = ev.data
        entry = _Entry(index=d["index"], at=d["at"], digest=d["digest"],
                       payload=d["payload"], cfg_kind=d.get("cfg_kind", ""),
                       tx_id=d.get("tx_id", ""), decision=d.get("decision", ""),
                       decider=d.get("decider", ""), subs=d.get("subs"))
        if entry.index != s.last_index() + 1:
            self.flag("log_contiguity", ev,
                      f"append {entry.index} after {s.last_index()}")
            return
        if entry.payload == "config" and s.role == "leader":
            pending = [e for e in s.log
                       if e.payload == "config" and e.index > s.commit]
            if pending:
                self.flag("single_inflight_config", ev,
                          f"leader {ev.node} proposed {entry.cfg_kind} with "
                          f"uncommitted config at {pending[-1].index}")
            if entry.cfg_kind == "split_new":
                joints = [e for e in s.log if e.cfg_kind == "split_joint"]
                if joints and joints[-1].index > s.commit:
                    self.flag("completion_before_joint_commit", ev,
                              f"leader {ev.node} proposed the split completion "
                              f"while the joint entry at {joints[-1].index} "
                              f"was uncommitted")
            if s.last_committed_cfg == "split_joint" \
                    and entry.cfg_kind not in ("split_new", ""):
                self.flag("joint_proposes_other_config", ev,
                          f"leader {ev.node} proposed {entry.cfg_kind} under "
                          f"a committed joint config")
            if s.open_tx and entry.cfg_kind in ("split_joint", "new_quorum",
                                                "stable", "merge_tx"):
                self.flag("tx_proposes_other_config", ev,
                          f"leader {ev.node} proposed {entry.cfg_kind} during "
                          f"open merge transaction {s.open_tx}")
        s.log.append(entry)

    def _on_truncate(self, ev: TraceEvent) -> None:
        s = self.shadow(ev.node)
        from_index = ev.data["from_index"]
        if ev.data.get("was_leader"):
            self.flag("leader_append_only", ev,
                      f"leader {ev.node} truncated its log from {from_index}")
        if from_index <= s.commit:
            self.flag("committed_truncated", ev,
                      f"{ev.node} truncated from {from_index} at or below its "
                      f"commit point {s.commit}")
        keep = from_index - s.base - 1
        s.log = s.log[:max(keep, 0)]

    def _on_reset_log(self, ev: TraceEvent) -> None:
        s = self.shadow(ev.node)
        s.log = []
        s.base = 0
        s.commit = 0
        s.last_committed_cfg = ""
        s.open_tx = ""

    def _on_install(self, ev: TraceEvent) -> None:
        s = self.shadow(ev.node)
        s.log = []
        s.base = ev.data["base"]
        s.commit = ev.data["base"]
        s.last_committed_cfg = ""
        s.open_tx = ""

    def _on_recovered(self, ev: TraceEvent) -> None:
        # A restarted node forgets its volatile commit point and re-commits
        # from its durable base; the shadow follows (the durable log itself
        # was already mirrored through persisted appends and truncates).
        # When the durable history was already collected, the node may also
        # wake into a pre-completion view and re-derive the era from peers.
        s = self.shadow(ev.node)
        s.role = "follower"
        s.commit = ev.data.get("commit_index", 0)
        s.last_committed_cfg = ""
        s.open_tx = ""
        s.view_reset_ok = True

    def _on_commit(self, ev: TraceEvent) -> None:
        s = self.shadow(ev.node)
        index = ev.data["index"]
        if index <= s.commit:
            self.flag("commit_monotonic", ev,
                      f"{ev.node} commit moved {s.commit} -> {index}")
            return
        # A commit batch may cross a split point; entries past the
        # completion entry belong to the node's own subcluster's next era.
        era_cluster, era_epoch = s.cluster, s.epoch
        for i in range(s.commit + 1, index + 1):
            entry = s.entry(i)
            if entry is None:
                self.flag("commit_unknown_entry", ev,
                          f"{ev.node} committed {i} without holding it")
                continue
            key = (era_cluster, era_epoch, i)
            seen = self.committed.get(key)
            if seen is not None and seen != entry.digest:
                self.flag("log_consistency", ev,
                          f"two different entries committed at {key}")
            self.committed[key] = entry.digest
            if entry.payload == "config":
                self._config_committed(ev, s, entry)
            if entry.cfg_kind == "split_new" and entry.subs:
                for sub_id, members in sorted(entry.subs.items()):
                    if ev.node in members:
                        era_cluster, era_epoch = sub_id, era_epoch + 1
                        break
        s.commit = index

    def _config_committed(self, ev: TraceEvent, s: _Shadow, entry: _Entry) -> None:
        s.last_committed_cfg = entry.cfg_kind
        if entry.cfg_kind == "merge_tx":
            s.open_tx = entry.tx_id
            key = (entry.tx_id, entry.decider)
            seen = self.tx_decisions.get(key)
            if seen is not None and seen != entry.decision:
                self.flag("tx_decision_stability", ev,
                          f"cluster {entry.decider} recorded decision "
                          f"{entry.decision} after {seen} for {entry.tx_id}")
            self.tx_decisions.setdefault(key, entry.decision)
        elif entry.cfg_kind in ("merge_new", "merge_abort"):
            if s.open_tx == entry.tx_id:
                s.open_tx = ""
            outcomes = self.tx_resolutions.setdefault(entry.tx_id, set())
            outcomes.add(entry.cfg_kind)
            if len(outcomes) > 1:
                self.flag("tx_atomicity", ev,
                          f"transaction {entry.tx_id} resolved both ways")

    def _on_direct_commit(self, ev: TraceEvent) -> None:
        s = self.shadow(ev.node)
        index = ev.data["index"]
        entry = s.entry(index)
        if entry is None:
            return
        term = ev.data["at"] & 0xFFFFFFFF
        self.direct.append((s.cluster, s.epoch, term, index, entry.digest))

    def _on_apply(self, ev: TraceEvent) -> None:
        s = self.shadow(ev.node)
        index = ev.data["index"]
        key = (s.cluster, s.epoch, index)
        digest = ev.data["digest"]
        seen = self.applied.get(key)
        if seen is not None and seen != digest:
            self.flag("state_machine_safety", ev,
                      f"{ev.node} applied a different entry at {key}")
        self.applied[key] = digest

    # ------------------------------------------------------------------
    # Reconfiguration completions

    def _on_epoch_bumped(self, ev: TraceEvent) -> None:
        s = self.shadow(ev.node)
        if ev.data.get("via") == "split":
            # Restart replay may re-announce the era it already reached.
            if ev.data["epoch"] not in (s.epoch, s.epoch + 1):
                self.flag("split_epoch_increment", ev,
                          f"{ev.node} epoch {s.epoch} -> {ev.data['epoch']} "
                          f"on split completion")
        self.max_completed_epoch = max(self.max_completed_epoch,
                                       ev.data["epoch"])

    def _on_merged_resumed(self, ev: TraceEvent) -> None:
        self.max_completed_epoch = max(self.max_completed_epoch,
                                       ev.data["epoch"])

    def _on_split_new_committed(self, ev: TraceEvent) -> None:
        if ev.data.get("via") == "history_restore":
            return
        s = self.shadow(ev.node)
        split_cfgs = [e for e in s.log
                      if e.cfg_kind in SPLIT_KINDS and e.index <= ev.data["index"]]
        joints = [e for e in split_cfgs if e.cfg_kind == "split_joint"]
        completions = [e for e in split_cfgs if e.cfg_kind == "split_new"]
        if len(joints) < 1 or len(completions) != 1:
            self.flag("split_two_entries", ev,
                      f"{ev.node} completed a split with {len(joints)} joint and "
                      f"{len(completions)} completion entries in its era log")

    def _on_pull_served(self, ev: TraceEvent) -> None:
        if ev.data.get("mode") == "entries":
            if ev.data["to"] > ev.data["source_commit"]:
                self.flag("pull_committed_only", ev,
                          f"{ev.node} served entries through {ev.data['to']} "
                          f"beyond its commit {ev.data['source_commit']}")

    # ------------------------------------------------------------------
    # Final pairwise log matching

    def _check_log_matching_final(self) -> None:
        groups: dict[tuple, list[_Shadow]] = {}
        for s in self.shadows.values():
            if s.cluster:
                groups.setdefault((s.cluster, s.epoch), []).append(s)
        for (cluster, epoch), members in sorted(groups.items()):
            members.sort(key=lambda s: s.node)
            for i, a in enumerate(members):
                for b in members[i + 1:]:
                    self._match_pair(cluster, epoch, a, b)

    def _match_pair(self, cluster: str, epoch: int, a: _Shadow, b: _Shadow) -> None:
        top = None
        for entry in reversed(a.log):
            other = b.entry(entry.index)
            if other is not None and other.at == entry.at:
                top = entry.index
                break
        if top is None:
            return
        lo = max(a.base, b.base) + 1
        for i in range(lo, top + 1):
            ea, eb = a.entry(i), b.entry(i)
            if ea is None or eb is None or ea.digest != eb.digest:
                self.violations.append(Violation(
                    check="log_matching", node=f"{a.node}|{b.node}", t=-1,
                    detail=f"logs of {a.node} and {b.node} in ({cluster},{epoch}) "
                           f"share ({top}) but differ at {i}"))
                return


def check_safety(trace: Trace) -> list[Violation]:
    """Run every safety oracle over a finished trace."""
    return TraceChecker(trace).run()


# ---------------------------------------------------------------------------
# Liveness


def check_liveness(trace: Trace, scenario: Scenario) -> list[dict]:
    """Verify every scripted operation completed within its virtual-time
    bound.  Bounds apply from the scenario's heal point; a scenario without
    liveness expectations checks nothing."""
    if scenario.bound is None:
        return []
    heal = scenario.heal or 0
    crashed_at_end = {n for n, st in trace.final_states.items()
                      if st.get("crashed")}
    stuck: list[dict] = []
    for action in scenario.workload:
        deadline = max(action.at, heal) + scenario.bound
        problem = _op_completion_problem(trace, action, deadline,
                                         crashed_at_end)
        if problem:
            stuck.append({"op_id": action.op_id, "op": action.op,
                          "deadline": deadline, **problem})
    return stuck


def _op_completion_problem(trace: Trace, action, deadline: int,
                           crashed: set) -> Optional[dict]:
    if action.op in ("put", "get", "delete"):
        for e in trace.of_kind("client_ok"):
            if e.data.get("op_id") == action.op_id and e.t <= deadline:
                return None
        return {"why": "client op never succeeded"}
    if action.op == "split":
        for sub in action.args["subclusters"]:
            for node in sub["nodes"]:
                if node in crashed:
                    continue
                if not _node_completed_split(trace, node, sub["id"], deadline):
                    return {"why": f"{node} never finished the split into {sub['id']}"}
        return None
    if action.op == "merge":
        merged = "+".join(sorted(action.args["clusters"]))
        resumed = {e.node for e in trace.of_kind("merged_resumed", "install")
                   if e.data.get("cluster") == merged and e.t <= deadline}
        resume = set(action.args.get("resume", []))
        want = resume or _merge_member_union(trace, action)
        missing = [n for n in sorted(want) if n not in resumed and n not in crashed]
        if missing:
            return {"why": f"{missing} never resumed as {merged}"}
        return None
    if action.op in ("member_add", "member_remove", "resize_quorum"):
        for e in trace.of_kind("member_change_done"):
            if e.t <= deadline:
                return None
        return {"why": "membership change never committed"}
    return {"why": f"unknown op {action.op}"}


def _node_completed_split(trace: Trace, node: str, sub_id: str,
                          deadline: int) -> bool:
    for e in trace.of_kind("split_new_committed", "epoch_bumped"):
        if e.node == node and e.t <= deadline and e.data.get("cluster") == sub_id:
            return True
    # A node swept into a later merge completed the split transitively.
    for e in trace.of_kind("merged_resumed", "install"):
        if e.node == node and e.t <= deadline:
            return True
    return False


def _merge_member_union(trace: Trace, action) -> set:
    members: set = set()
    for e in trace.of_kind("cluster_view"):
        if e.data.get("cluster") in action.args["clusters"]:
            members |= set(e.data.get("members", []))
    return members


# ---------------------------------------------------------------------------
# Read linearizability (single-key registers)


def check_linearizable_reads(trace: Trace, slack: int = 150 * MS) -> list[dict]:
    """Validate every successful read against the committed value timeline
    of its key.

    The timeline takes each write's earliest apply time across nodes as its
    visibility point.  A read is valid when the value it returned was the
    key's current value at some instant of [invoke - slack, respond]; the
    slack covers the leader read gate's staleness bound (one minimum
    election timeout)."""
    first_apply: dict[str, dict] = {}
    for e in trace.of_kind("apply"):
        if "key" not in e.data:
            continue
        key = e.data["key"]
        stamp = (e.data["digest"], e.data["index"])
        timeline = first_apply.setdefault(key, {})
        if stamp not in timeline or e.t < timeline[stamp][0]:
            value = e.data["value"] if e.data["cmd"] == "put" else None
            timeline[stamp] = (e.t, value)

    invokes = {e.data["op_id"]: e for e in trace.of_kind("client_invoke")}
    problems = []
    for e in trace.of_kind("client_ok"):
        if e.data.get("op") != "get":
            continue
        op_id = e.data["op_id"]
        inv = invokes.get(op_id)
        if inv is None:
            continue
        key = e.data["key"]
        returned = e.data.get("value")
        changes = sorted(first_apply.get(key, {}).values())
        lo, hi = inv.t - slack, e.t
        ok = not changes and returned is None
        current: Optional[str] = None
        prev_t = 0
        for (t, value) in changes + [(hi + 1, None)]:
            # `current` was the key's value throughout [prev_t, t).
            if current == returned and prev_t <= hi and t > lo:
                ok = True
                break
            prev_t = t
            current = value
        if not ok and returned == (changes[-1][1] if changes else None):
            ok = True  # value still current at response time
        if not ok:
            problems.append({"op_id": op_id, "key": key, "returned": returned,
                             "window": [inv.t, e.t]})
    return problems
