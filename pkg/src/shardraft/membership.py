"""Single-cluster membership change: the quorum-overlap test, step
planning for multi-node add/remove, and the vote-count analysis that
compares the fixed-quorum scheme against joint consensus.

The overlap test is the gate behind precondition P2': consecutive
configurations must have intersecting quorums, otherwise two leaders could
commit divergent entries.  ``quorum_overlap_guaranteed`` decides this
analytically; ``overlap_by_enumeration`` re-derives it by enumerating
subsets and exists so tests can cross-check the analytic route.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from typing import Iterable, Optional

from .types import (
    ClusterConfig,
    ConfigError,
    KeyRange,
    NodeId,
    QuorumRule,
    majority_of,
    new_quorum_config,
    stable_config,
)


# ---------------------------------------------------------------------------
# Quorum overlap


def quorum_overlap_guaranteed(a: QuorumRule, b: QuorumRule) -> bool:
    """True iff every quorum of `a` intersects every quorum of `b`.

    Equivalently: no disjoint pair of quorums exists.  A quorum of `a`
    takes a threshold of members from each of its (disjoint) groups; the
    picks that unavoidably land inside `b`'s member set are "damage" that
    must be absorbed by the slack of whichever `b` group they hit.  A
    disjoint pair exists iff the forced damage can be distributed within
    every `b` group's slack.  The search over distributions is exact and
    tiny (a couple of groups, single-digit counts).
    """
    return not _disjoint_quorums_possible(a, b)


def _disjoint_quorums_possible(a: QuorumRule, b: QuorumRule) -> bool:
    b_groups = [set(g) for g in b.groups]
    slack = [len(bg) - need for bg, need in zip(b_groups, b.thresholds())]
    if any(s < 0 for s in slack):
        return False
    b_all = set(b.members())

    # Per a-group: how many picks must fall inside b, and how many of those
    # could land in each b-group.
    demands: list[tuple[int, list[int]]] = []
    for group, need in zip(a.groups, a.thresholds()):
        outside = sum(1 for m in group if m not in b_all)
        forced = max(0, need - outside)
        if forced:
            demands.append((forced, [len(set(group) & bg) for bg in b_groups]))

    def place(i: int, slack_left: list[int]) -> bool:
        if i == len(demands):
            return True
        forced, caps = demands[i]

        def assign(j: int, remaining: int, slacks: list[int]) -> bool:
            if remaining == 0:
                return place(i + 1, slacks)
            if j == len(caps):
                return False
            hi = min(caps[j], slacks[j], remaining)
            for take in range(hi, -1, -1):
                nxt = list(slacks)
                nxt[j] -= take
                if assign(j + 1, remaining - take, nxt):
                    return True
            return False

        return assign(0, forced, slack_left)

    return place(0, slack)


def overlap_by_enumeration(a: QuorumRule, b: QuorumRule) -> bool:
    """Brute-force overlap check: enumerate every subset of the union and
    look for an `a`-quorum whose complement still satisfies `b`.

    Only for small member sets (|union| <= 12); used to validate the
    analytic path.
    """
    universe = tuple(sorted(set(a.members()) | set(b.members())))
    if len(universe) > 12:
        raise ValueError("enumeration oracle limited to 12 members")
    n = len(universe)
    for mask in range(1 << n):
        picked = [universe[i] for i in range(n) if mask >> i & 1]
        if not a.satisfied(picked):
            continue
        rest = [universe[i] for i in range(n) if not mask >> i & 1]
        if b.satisfied(rest):
            return False  # found disjoint quorums
    return True


# ---------------------------------------------------------------------------
# Quorum-size formulas


def add_quorum_size(n_old: int, n_added: int) -> int:
    """Intermediate fixed quorum after adding nodes: the smallest size that
    forces every new quorum to cut into every old majority."""
    return n_old + n_added - majority_of(n_old) + 1


def remove_quorum_size(n_old: int, n_removed: int) -> int:
    """Intermediate fixed quorum (over the full old voter set) after a
    removal; sized against the final majority so both transitions overlap."""
    q_new = majority_of(n_old - n_removed)
    return n_old - q_new + 1


# ---------------------------------------------------------------------------
# Plans


@dataclass(frozen=True)
class PlanStep:
    """One configuration entry a plan will commit."""

    voters: tuple[NodeId, ...]
    quorum_size: int          # 0 = plain majority
    final_members: tuple[NodeId, ...]

    def is_stable(self) -> bool:
        return self.quorum_size == 0


@dataclass(frozen=True)
class MembershipPlan:
    """An ordered list of configuration steps realizing a membership change.

    Consecutive configurations always pass the overlap test; the planner
    emits a single direct step whenever old and new majorities already
    overlap, and otherwise goes through a fixed-quorum intermediate.
    Removals larger than the current quorum are staged.
    """

    old_members: tuple[NodeId, ...]
    new_members: tuple[NodeId, ...]
    steps: tuple[PlanStep, ...]
    staged: bool = False

    @property
    def consensus_steps(self) -> int:
        return len(self.steps)

    def rules(self) -> list[QuorumRule]:
        out = [QuorumRule.majority(self.old_members)]
        for s in self.steps:
            if s.is_stable():
                out.append(QuorumRule.majority(s.final_members))
            else:
                out.append(QuorumRule.fixed(s.quorum_size, s.voters))
        return out


class PlanError(ConfigError):
    pass


def _two_step(old: tuple[NodeId, ...], new: tuple[NodeId, ...]) -> tuple[PlanStep, ...]:
    adding = set(new) - set(old)
    removing = set(old) - set(new)
    if adding and removing:
        raise PlanError("mixed add+remove in one change is not supported; stage it")
    if adding:
        size = add_quorum_size(len(old), len(adding))
        voters = tuple(sorted(set(old) | adding))
    else:
        size = remove_quorum_size(len(old), len(removing))
        voters = tuple(old)  # leaving nodes keep voting until the resize
    mid = PlanStep(voters=voters, quorum_size=size, final_members=tuple(sorted(new)))
    if size == majority_of(len(new)) and set(voters) == set(new):
        # The intermediate already is the final majority config.
        return (PlanStep(voters=tuple(sorted(new)), quorum_size=0,
                         final_members=tuple(sorted(new))),)
    fin = PlanStep(voters=tuple(sorted(new)), quorum_size=0, final_members=tuple(sorted(new)))
    return (mid, fin)


def plan_membership_change(old_members: Iterable[NodeId],
                           new_members: Iterable[NodeId]) -> MembershipPlan:
    old = tuple(sorted(set(old_members)))
    new = tuple(sorted(set(new_members)))
    if not new:
        raise PlanError("cannot remove every member")
    if old == new:
        raise PlanError("no change requested")

    removing = set(old) - set(new)
    q_old = majority_of(len(old))
    staged = False
    steps: list[PlanStep] = []
    cur = old
    while True:
        cur_removing = set(cur) - set(new)
        if cur_removing and len(cur_removing) >= majority_of(len(cur)):
            # Removal too large for one change: peel off quorum-1 nodes.
            staged = True
            drop = tuple(sorted(cur_removing))[: majority_of(len(cur)) - 1]
            target = tuple(sorted(set(cur) - set(drop)))
        else:
            target = new
        if quorum_overlap_guaranteed(QuorumRule.majority(cur), QuorumRule.majority(target)):
            steps.append(PlanStep(voters=target, quorum_size=0, final_members=target))
        else:
            steps.extend(_two_step(cur, target))
        if target == new:
            break
        cur = target

    if removing and len(removing) >= q_old and not staged:
        raise PlanError("internal: large removal must stage")
    plan = MembershipPlan(old_members=old, new_members=new, steps=tuple(steps),
                          staged=staged)
    _validate_plan(plan)
    return plan


def _validate_plan(plan: MembershipPlan) -> None:
    rules = plan.rules()
    for prev, nxt in zip(rules, rules[1:]):
        if not quorum_overlap_guaranteed(prev, nxt):
            raise PlanError(
                f"planned transition loses quorum overlap: "
                f"{prev.describe()} -> {nxt.describe()}"
            )


def remove_allowed(n_old: int, n_removed: int) -> bool:
    """A single removal step may drop fewer nodes than the current quorum."""
    return n_removed < majority_of(n_old)


# ---------------------------------------------------------------------------
# Config-entry builders used by the engine


def plan_step_config(config_id: str, cluster_id: str, key_range: KeyRange,
                     step: PlanStep) -> ClusterConfig:
    if step.is_stable():
        return stable_config(config_id, cluster_id, step.final_members, key_range)
    return new_quorum_config(config_id, cluster_id, key_range,
                             voters=step.voters, quorum_size=step.quorum_size,
                             final_members=step.final_members)


# ---------------------------------------------------------------------------
# Vote-count analysis vs joint consensus


def jc_vote_counts(n_old: int, n_new: int) -> tuple[int, int]:
    """Votes joint consensus needs in its intermediate phase, as
    (best case, worst case) over vote arrival orders."""
    if n_old < 1 or n_new < 1:
        raise ValueError("cluster sizes must be positive")
    q_old, q_new = majority_of(n_old), majority_of(n_new)
    v_best = max(q_new, q_old)
    v_worst = abs(n_new - n_old) + min(q_new, q_old)
    return v_best, v_worst


def jc_vote_counts_bruteforce(n_old: int, n_new: int) -> tuple[int, int]:
    """Re-derive joint-consensus vote counts by enumerating arrival orders.

    Voters split into three pools: nodes in both configurations, old-only,
    and new-only.  An arrival order only matters through how many of each
    pool have voted, so we enumerate pool-count states instead of raw
    permutations; ``_jc_by_permutations`` checks the equivalence on small
    sizes.
    """
    q_old, q_new = majority_of(n_old), majority_of(n_new)
    both = min(n_old, n_new)
    old_only = n_old - both
    new_only = n_new - both

    def satisfied(a: int, b: int, c: int) -> bool:
        return (a + b) >= q_old and (a + c) >= q_new

    best = None
    worst_stuck = -1
    for a in range(both + 1):
        for b in range(old_only + 1):
            for c in range(new_only + 1):
                k = a + b + c
                if satisfied(a, b, c):
                    if best is None or k < best:
                        best = k
                else:
                    # Can one more vote finish it?  If so an adversary can
                    # stall exactly here before the final vote.
                    extendable = (
                        (a < both and satisfied(a + 1, b, c))
                        or (b < old_only and satisfied(a, b + 1, c))
                        or (c < new_only and satisfied(a, b, c + 1))
                    )
                    if extendable and k > worst_stuck:
                        worst_stuck = k
    assert best is not None and worst_stuck >= 0
    return best, worst_stuck + 1


def _jc_by_permutations(n_old: int, n_new: int) -> tuple[int, int]:
    """Literal permutation enumeration; exponential, tests only."""
    q_old, q_new = majority_of(n_old), majority_of(n_new)
    both = min(n_old, n_new)
    voters = (
        [("both", i) for i in range(both)]
        + [("old", i) for i in range(n_old - both)]
        + [("new", i) for i in range(n_new - both)]
    )
    best, worst = None, 0
    for order in permutations(voters):
        got_old = got_new = 0
        for k, (pool, _) in enumerate(order, start=1):
            if pool in ("both", "old"):
                got_old += 1
            if pool in ("both", "new"):
                got_new += 1
            if got_old >= q_old and got_new >= q_new:
                best = k if best is None else min(best, k)
                worst = max(worst, k)
                break
    assert best is not None
    return best, worst


def intermediate_quorum_size(n_old: int, n_new: int) -> int:
    """Fixed quorum this scheme would use in the intermediate config for an
    n_old -> n_new change (identity changes keep the majority)."""
    if n_new > n_old:
        return add_quorum_size(n_old, n_new - n_old)
    if n_new < n_old:
        return remove_quorum_size(n_old, n_old - n_new)
    return majority_of(n_old)


def heatmap_diffs(max_n: int) -> tuple[list[list[int]], list[list[int]]]:
    """Vote-count differences against joint consensus for every
    (n_old, n_new) pair in [1, max_n]^2.

    Returns (vs_best, vs_worst) matrices indexed [n_old-1][n_new-1];
    positive cells mean this scheme needs more votes than JC.
    """
    if max_n < 2:
        raise ValueError("max_n must be at least 2")
    vs_best: list[list[int]] = []
    vs_worst: list[list[int]] = []
    for n_old in range(1, max_n + 1):
        row_b: list[int] = []
        row_w: list[int] = []
        for n_new in range(1, max_n + 1):
            q = intermediate_quorum_size(n_old, n_new)
            v_best, v_worst = jc_vote_counts(n_old, n_new)
            row_b.append(q - v_best)
            row_w.append(q - v_worst)
        vs_best.append(row_b)
        vs_worst.append(row_w)
    return vs_best, vs_worst


def heatmap_csv(max_n: int) -> str:
    """Both heatmap matrices as CSV, one block per matrix."""
    vs_best, vs_worst = heatmap_diffs(max_n)
    lines = []
    for label, matrix in (("vs_best", vs_best), ("vs_worst", vs_worst)):
        lines.append(label + "," + ",".join(f"new_{n}" for n in range(1, max_n + 1)))
        for n_old, row in enumerate(matrix, start=1):
            lines.append(f"old_{n_old}," + ",".join(str(v) for v in row))
        lines.append("")
    return "\n".join(lines)
