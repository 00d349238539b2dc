"""Scenario files: the human-readable description of a simulation run.

A scenario is YAML with four sections::

    name: two-way-split
    horizon_ms: 20000                # virtual end of the run
    timing: {election_min_ms: 150, election_max_ms: 300}   # optional
    clusters:                        # initial topology
      - id: c0
        nodes: [n1, n2, n3, n4, n5, n6]
        range: ["", null]            # half-open [lo, hi); null = unbounded
    spare_nodes: [n7, n8]            # exist but belong to no cluster yet
    workload:                        # scripted actions at virtual times
      - {at_ms: 500,  op: put, key: apple, value: "1"}
      - {at_ms: 800,  op: get, key: apple}
      - {at_ms: 900,  op: delete, key: apple}
      - {at_ms: 2000, op: split, cluster: c0, subclusters:
           [{id: c0.1, nodes: [n1, n2, n3], range: ["", "m"]},
            {id: c0.2, nodes: [n4, n5, n6], range: ["m", null]}]}
      - {at_ms: 9000, op: merge, clusters: [c0.1, c0.2], coordinator: c0.1}
      - {at_ms: 1000, op: member_add, cluster: c0, nodes: [n7]}
      - {at_ms: 1000, op: member_remove, cluster: c0, nodes: [n6]}
      - {at_ms: 1000, op: resize_quorum, cluster: c0}
    faults:
      - {kind: delay, min_ms: 1, max_ms: 5}          # base link latency
      - {kind: drop, from_ms: 0, to_ms: 8000, rate: 0.05}
      - {kind: duplicate, from_ms: 0, to_ms: 8000, rate: 0.02}
      - {kind: reorder, from_ms: 0, to_ms: 8000, rate: 0.1, extra_ms: 40}
      - {kind: partition, from_ms: 3000, to_ms: 6000,
         groups: [[n1, n2], [n3, n4, n5, n6]]}
      - {kind: one_way, from_ms: 0, to_ms: 500, src: n1, dst: n2}
      - {kind: crash, at_ms: 4000, node: n2}
      - {kind: restart, at_ms: 7000, node: n2}
      - {kind: crash_on, event: tx_prepared, node: $emitter, delay_ms: 0}
    liveness: {heal_ms: 8000, bound_ms: 10000}       # optional expectations

Client and admin links are reliable; faults apply to node-to-node traffic.
``crash_on`` fires once, when the named trace event first occurs
(``$emitter`` resolves to the node that emitted it).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import yaml

from ..types import KeyRange, NodeId

MS = 1000  # microseconds per scripted millisecond


class ScenarioError(ValueError):
    pass


@dataclass
class ClusterSpec:
    cluster_id: str
    nodes: list[str]
    key_range: KeyRange


@dataclass
class Action:
    at: int  # virtual microseconds
    op: str
    args: dict
    op_id: str = ""


@dataclass
class Fault:
    kind: str
    args: dict


@dataclass
class Scenario:
    name: str
    horizon: int
    clusters: list[ClusterSpec]
    workload: list[Action]
    faults: list[Fault]
    spare_nodes: list[str] = field(default_factory=list)
    election_min: int = 150 * MS
    election_max: int = 300 * MS
    heal: Optional[int] = None
    bound: Optional[int] = None

    def all_nodes(self) -> list[str]:
        out = list(self.spare_nodes)
        for c in self.clusters:
            out.extend(c.nodes)
        return sorted(set(out))

    def validate(self) -> None:
        if self.horizon <= 0:
            raise ScenarioError("horizon must be positive")
        if not self.clusters:
            raise ScenarioError("at least one cluster required")
        seen: set = set()
        for c in self.clusters:
            if not c.nodes:
                raise ScenarioError(f"cluster {c.cluster_id} has no nodes")
            overlap = seen & set(c.nodes)
            if overlap:
                raise ScenarioError(f"nodes {sorted(overlap)} in two clusters")
            seen |= set(c.nodes)
        for i, a in enumerate(self.clusters):
            for b in self.clusters[i + 1:]:
                if a.key_range.overlaps(b.key_range):
                    raise ScenarioError(
                        f"ranges of {a.cluster_id} and {b.cluster_id} overlap")
        known = set(self.all_nodes())
        for act in self.workload:
            if act.op in ("member_add",) :
                missing = set(act.args.get("nodes", [])) - known
                if missing:
                    raise ScenarioError(f"member_add of unknown nodes {missing}")
        for f in self.faults:
            if f.kind in ("crash", "restart") and f.args.get("node") not in known:
                raise ScenarioError(f"{f.kind} of unknown node {f.args.get('node')}")


def _range_from(obj) -> KeyRange:
    lo, hi = obj
    return KeyRange.single(lo or "", hi)


def scenario_from_obj(obj: dict) -> Scenario:
    timing = obj.get("timing", {})
    clusters = [
        ClusterSpec(cluster_id=c["id"], nodes=list(c["nodes"]),
                    key_range=_range_from(c.get("range", ["", None])))
        for c in obj.get("clusters", [])
    ]
    workload = []
    for i, w in enumerate(obj.get("workload", [])):
        w = dict(w)
        at = int(w.pop("at_ms")) * MS
        op = w.pop("op")
        workload.append(Action(at=at, op=op, args=w, op_id=f"op{i}"))
    faults = []
    for f in obj.get("faults", []):
        f = dict(f)
        faults.append(Fault(kind=f.pop("kind"), args=f))
    live = obj.get("liveness") or {}
    scn = Scenario(
        name=obj.get("name", "unnamed"),
        horizon=int(obj["horizon_ms"]) * MS,
        clusters=clusters,
        workload=sorted(workload, key=lambda a: (a.at, a.op_id)),
        faults=faults,
        spare_nodes=list(obj.get("spare_nodes", [])),
        election_min=int(timing.get("election_min_ms", 150)) * MS,
        election_max=int(timing.get("election_max_ms", 300)) * MS,
        heal=int(live["heal_ms"]) * MS if "heal_ms" in live else None,
        bound=int(live["bound_ms"]) * MS if "bound_ms" in live else None,
    )
    scn.validate()
    return scn


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        obj = yaml.safe_load(fh)
    if not isinstance(obj, dict):
        raise ScenarioError(f"{path} does not contain a scenario mapping")
    return scenario_from_obj(obj)
