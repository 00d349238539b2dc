"""Minimum-failure probing: find the smallest crash set that permanently
stalls a reconfiguration phase.

The probe enumerates crash sets of increasing size and injects them at the
probed phase's boundary:

* split phase 1 (entering joint mode): crashes land before the operator
  command, so the joint entry must commit against the depleted cluster;
* split phase 2 (leaving joint mode): crashes trigger on the first
  completion commit, after the departing leader has multicast the
  completion entry and its commit notification;
* merge phases: crashes land at the command, on the prepared transaction,
  or on the first merge-config commit.

A phase counts as stalled when the operation shows no (further) progress
by the horizon: no joint commit for split phase 1, no subcluster with a
post-split leader for phase 2, and no resumed merged node for merges.
"""

from __future__ import annotations

from itertools import combinations

from .scenario import Scenario, scenario_from_obj
from .sim import run_scenario

HORIZON_MS = 24000


def _split_scenario(sub_size: int, ways: int, crash_nodes=(),
                    crash_at_ms=None, crash_on=None) -> Scenario:
    n = sub_size * ways
    nodes = [f"n{i}" for i in range(1, n + 1)]
    cuts = [chr(ord("e") + 4 * i) for i in range(ways - 1)]
    bounds = [""] + cuts + [None]
    subs = [{"id": f"c0.{i + 1}",
             "nodes": nodes[i * sub_size:(i + 1) * sub_size],
             "range": [bounds[i], bounds[i + 1]]}
            for i in range(ways)]
    faults = []
    for victim in crash_nodes:
        if crash_at_ms is not None:
            faults.append({"kind": "crash", "at_ms": crash_at_ms, "node": victim})
        else:
            faults.append({"kind": "crash_on", "event": crash_on, "node": victim})
    return scenario_from_obj({
        "name": f"probe-split-{ways}x{sub_size}",
        "horizon_ms": HORIZON_MS,
        "clusters": [{"id": "c0", "nodes": nodes, "range": ["", None]}],
        "workload": [{"at_ms": 1200, "op": "split", "cluster": "c0",
                      "subclusters": subs}],
        "faults": faults,
    })


def _merge_scenario(sub_size: int, ways: int, crash_nodes=(),
                    crash_at_ms=None, crash_on=None) -> Scenario:
    n = sub_size * ways
    nodes = [f"n{i}" for i in range(1, n + 1)]
    cuts = [chr(ord("e") + 4 * i) for i in range(ways - 1)]
    bounds = [""] + cuts + [None]
    clusters = [{"id": f"c{i}",
                 "nodes": nodes[i * sub_size:(i + 1) * sub_size],
                 "range": [bounds[i], bounds[i + 1]]}
                for i in range(ways)]
    faults = []
    for victim in crash_nodes:
        if crash_at_ms is not None:
            faults.append({"kind": "crash", "at_ms": crash_at_ms, "node": victim})
        else:
            faults.append({"kind": "crash_on", "event": crash_on, "node": victim})
    return scenario_from_obj({
        "name": f"probe-merge-{ways}x{sub_size}",
        "horizon_ms": HORIZON_MS,
        "clusters": clusters,
        "workload": [{"at_ms": 1200, "op": "merge",
                      "clusters": [c["id"] for c in clusters],
                      "coordinator": "c0"}],
        "faults": faults,
    })


def _split_stalled(trace, phase: int, ways: int) -> bool:
    if phase == 1:
        return not trace.of_kind("split_joint_committed")
    # Phase 2 stalls when no subcluster ends up operational: at the horizon
    # no surviving node leads at the post-split epoch.
    for st in trace.final_states.values():
        if not st.get("crashed") and st.get("role") == "leader" \
                and st.get("epoch", 0) >= 1:
            return False
    return True


def _merge_stalled(trace) -> bool:
    return not trace.of_kind("merged_resumed")


def min_failure_probe(operation: str, phase: int, sub_size: int = 3,
                      ways: int = 2, seed: int = 7) -> int:
    """Smallest number of crashed nodes that stops the phase for good."""
    if operation == "split":
        build, stalled = _split_scenario, lambda t: _split_stalled(t, phase, ways)
        crash_kw = ({"crash_at_ms": 1100} if phase == 1
                    else {"crash_on": "split_new_committed"})
    elif operation == "merge":
        build, stalled = _merge_scenario, _merge_stalled
        crash_kw = {1: {"crash_at_ms": 1100},
                    2: {"crash_on": "tx_prepared"},
                    3: {"crash_on": "tx_committed"}}[phase]
    else:
        raise ValueError(f"unknown operation {operation!r}")

    nodes = [f"n{i}" for i in range(1, sub_size * ways + 1)]
    for k in range(1, len(nodes) + 1):
        for crashed in combinations(nodes, k):
            scn = build(sub_size, ways, crash_nodes=crashed, **crash_kw)
            trace = run_scenario(scn, seed=seed, collect_digests=False)
            if stalled(trace):
                return k
    return len(nodes)
