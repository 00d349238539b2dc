"""Seeded scenario generators for randomized protocol fuzzing.

Two flavors:

* ``safety_scenario`` throws everything at the protocol -- drops,
  duplicates, reordering, partitions, crash/restart cycles, interleaved
  reconfigurations -- and only the safety oracles are expected to hold;
* ``liveness_scenario`` keeps the same machinery but guarantees the
  protocol's liveness assumptions: every fault heals before the heal
  point, crashed nodes restart, and a quorum of every cluster is
  reachable afterwards, so every scripted operation must finish.

Scenario construction is a pure function of the seed.
"""

from __future__ import annotations

import random

from .oracles import check_liveness, check_safety
from .scenario import MS, Scenario, scenario_from_obj
from .sim import run_scenario

KEYS = ["ant", "bee", "cat", "dog", "elk", "fox", "gnu", "hen",
        "koi", "owl", "pig", "ram", "sow", "yak"]


def _kv_ops(rng: random.Random, start_ms: int, end_ms: int, count: int) -> list[dict]:
    ops = []
    for _ in range(count):
        at = rng.randrange(start_ms, end_ms)
        kind = rng.choice(["put", "put", "put", "get", "delete"])
        op = {"at_ms": at, "op": kind, "key": rng.choice(KEYS)}
        if kind == "put":
            op["value"] = f"v{rng.randrange(1000)}"
        ops.append(op)
    return ops


def _split_spec(rng: random.Random, cluster_id: str, nodes: list[str],
                ways: int) -> dict:
    cuts = sorted(rng.sample("bdfhjlnpr", ways - 1))
    bounds = [""] + list(cuts) + [None]
    shuffled = list(nodes)
    rng.shuffle(shuffled)
    sizes = [len(nodes) // ways] * ways
    for i in range(len(nodes) % ways):
        sizes[i] += 1
    subs = []
    pos = 0
    for i in range(ways):
        subs.append({
            "id": f"{cluster_id}.{i + 1}",
            "nodes": sorted(shuffled[pos:pos + sizes[i]]),
            "range": [bounds[i], bounds[i + 1]],
        })
        pos += sizes[i]
    return {"op": "split", "cluster": cluster_id, "subclusters": subs}


def safety_scenario(seed: int) -> Scenario:
    rng = random.Random(f"fuzz-safety:{seed}")
    n = rng.randrange(5, 10)
    nodes = [f"n{i}" for i in range(1, n + 1)]
    horizon = 14000

    two_clusters = n >= 6 and rng.random() < 0.4
    clusters = []
    if two_clusters:
        cut = rng.randrange(2, n - 2)
        clusters.append({"id": "c0", "nodes": nodes[:cut], "range": ["", "m"]})
        clusters.append({"id": "c1", "nodes": nodes[cut:], "range": ["m", None]})
    else:
        clusters.append({"id": "c0", "nodes": nodes, "range": ["", None]})

    workload = _kv_ops(rng, 500, horizon - 2000, rng.randrange(6, 14))
    # One or two reconfigurations, staggered.
    reconfig_at = rng.randrange(1500, 4000)
    if two_clusters:
        workload.append({"at_ms": reconfig_at, "op": "merge",
                         "clusters": ["c0", "c1"],
                         "coordinator": rng.choice(["c0", "c1"])})
    else:
        ways = 3 if n >= 8 and rng.random() < 0.4 else 2
        split = _split_spec(rng, "c0", nodes, ways)
        split["at_ms"] = reconfig_at
        workload.append(split)
        if rng.random() < 0.5:
            subs = split["subclusters"]
            merge_from = rng.sample(range(ways), 2)
            workload.append({
                "at_ms": reconfig_at + rng.randrange(3500, 6000),
                "op": "merge",
                "clusters": sorted(subs[i]["id"] for i in merge_from),
                "coordinator": subs[merge_from[0]]["id"],
            })

    faults: list[dict] = [{"kind": "delay", "min_ms": 1, "max_ms": 5}]
    for kind in ("drop", "duplicate", "reorder"):
        if rng.random() < 0.7:
            a = rng.randrange(0, horizon // 2)
            b = rng.randrange(a + 1000, horizon)
            faults.append({"kind": kind, "from_ms": a, "to_ms": b,
                           "rate": rng.choice([0.02, 0.05, 0.1, 0.2])})
    for _ in range(rng.randrange(0, 3)):
        cut = rng.randrange(1, n)
        group = sorted(rng.sample(nodes, cut))
        rest = sorted(set(nodes) - set(group))
        if not rest:
            continue
        a = rng.randrange(500, horizon - 2000)
        b = rng.randrange(a + 800, min(a + 6000, horizon))
        faults.append({"kind": "partition", "from_ms": a, "to_ms": b,
                       "groups": [group, rest]})
    if rng.random() < 0.4:
        faults.append({"kind": "one_way", "from_ms": rng.randrange(0, horizon // 2),
                       "to_ms": rng.randrange(horizon // 2, horizon),
                       "src": rng.choice(nodes), "dst": rng.choice(nodes)})
    for _ in range(rng.randrange(0, 3)):
        victim = rng.choice(nodes)
        down = rng.randrange(500, horizon - 3000)
        up = rng.randrange(down + 500, horizon)
        faults.append({"kind": "crash", "at_ms": down, "node": victim})
        if rng.random() < 0.8:
            faults.append({"kind": "restart", "at_ms": up, "node": victim})

    return scenario_from_obj({
        "name": f"fuzz-safety-{seed}",
        "horizon_ms": horizon,
        "clusters": clusters,
        "workload": workload,
        "faults": faults,
    })


def liveness_scenario(seed: int) -> Scenario:
    rng = random.Random(f"fuzz-liveness:{seed}")
    n = rng.randrange(5, 10)
    nodes = [f"n{i}" for i in range(1, n + 1)]
    heal = 9000
    horizon = 26000

    two_clusters = n >= 6 and rng.random() < 0.4
    clusters = []
    if two_clusters:
        cut = rng.randrange(3, n - 2) if n >= 7 else 3
        clusters.append({"id": "c0", "nodes": nodes[:cut], "range": ["", "m"]})
        clusters.append({"id": "c1", "nodes": nodes[cut:], "range": ["m", None]})
    else:
        clusters.append({"id": "c0", "nodes": nodes, "range": ["", None]})

    workload = _kv_ops(rng, 500, heal - 1000, rng.randrange(4, 9))
    reconfig_at = rng.randrange(1500, 3500)
    if two_clusters:
        workload.append({"at_ms": reconfig_at, "op": "merge",
                         "clusters": ["c0", "c1"],
                         "coordinator": rng.choice(["c0", "c1"])})
    else:
        ways = 3 if n >= 8 and rng.random() < 0.4 else 2
        split = _split_spec(rng, "c0", nodes, ways)
        split["at_ms"] = reconfig_at
        workload.append(split)

    # Faults confined to [0, heal); every crash restarts before heal.
    faults: list[dict] = [{"kind": "delay", "min_ms": 1, "max_ms": 5}]
    for kind in ("drop", "duplicate", "reorder"):
        if rng.random() < 0.6:
            a = rng.randrange(0, heal // 2)
            b = rng.randrange(a + 500, heal)
            faults.append({"kind": kind, "from_ms": a, "to_ms": b,
                           "rate": rng.choice([0.02, 0.05, 0.1])})
    if rng.random() < 0.7:
        cut = rng.randrange(1, n)
        group = sorted(rng.sample(nodes, cut))
        rest = sorted(set(nodes) - set(group))
        if rest:
            a = rng.randrange(500, heal - 2000)
            b = rng.randrange(a + 800, heal)
            faults.append({"kind": "partition", "from_ms": a, "to_ms": b,
                           "groups": [group, rest]})
    for _ in range(rng.randrange(0, 2)):
        victim = rng.choice(nodes)
        down = rng.randrange(500, heal - 2500)
        up = rng.randrange(down + 500, heal)
        faults.append({"kind": "crash", "at_ms": down, "node": victim})
        faults.append({"kind": "restart", "at_ms": up, "node": victim})

    return scenario_from_obj({
        "name": f"fuzz-liveness-{seed}",
        "horizon_ms": horizon,
        "clusters": clusters,
        "workload": workload,
        "faults": faults,
        "liveness": {"heal_ms": heal, "bound_ms": horizon - heal - 1000},
    })


def fuzz_one(seed: int, mode: str = "safety",
             defects: frozenset = frozenset()) -> dict:
    """Run one fuzz seed; returns a result summary with any findings."""
    scn = safety_scenario(seed) if mode == "safety" else liveness_scenario(seed)
    trace = run_scenario(scn, seed=seed, defects=defects,
                         collect_digests=False)
    violations = check_safety(trace)
    stuck = check_liveness(trace, scn) if mode == "liveness" else []
    return {
        "seed": seed,
        "mode": mode,
        "events": len(trace.events),
        "violations": [v.to_obj() for v in violations],
        "stuck": stuck,
    }


def fuzz_range(start: int, stop: int, mode: str = "safety",
               defects: frozenset = frozenset(),
               progress=None) -> list[dict]:
    results = []
    for seed in range(start, stop):
        res = fuzz_one(seed, mode=mode, defects=defects)
        results.append(res)
        if progress is not None:
            progress(res)
    return results
