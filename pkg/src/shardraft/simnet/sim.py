"""The deterministic discrete-event simulator.

One priority queue of (virtual time, sequence) events drives every node's
sequential processor, the fault pipeline, and two actors: a client issuing
scripted KV operations and an admin issuing scripted reconfigurations.
All randomness comes from generators derived from (seed, purpose), so a
(seed, scenario) pair fully determines the trace.

Node-to-node links go through the fault model (drop, duplicate, reorder,
partitions, one-way cuts, crash); client and admin links are reliable but
still asynchronous.  Crashed nodes lose volatile state and recover from
their durable store on restart, exactly like the file-backed service.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .. import messages as m
from ..kvstore import RouteTable
from ..node import Node, Role, Timing
from ..recovery import NamingRegistry, range_to_obj
from ..storage import MemoryStore
from ..types import KeyRange, stable_config
from .scenario import MS, Action, Fault, Scenario
from .trace import Trace, TraceEvent

CLIENT = "client"
ADMIN = "admin"
SIM = "$sim"


@dataclass(order=True)
class _Event:
    t: int
    seq: int
    kind: str = field(compare=False)
    payload: object = field(compare=False, default=None)


class Simulation:
    """Runs one (scenario, seed) pair to its horizon and yields the trace."""

    def __init__(self, scenario: Scenario, seed: int,
                 defects: frozenset = frozenset(),
                 collect_digests: bool = True,
                 store_factory=None, recover_nodes: bool = False,
                 trace_limit: Optional[int] = None) -> None:
        self.scn = scenario
        self.seed = seed
        self.defects = defects
        self.collect_digests = collect_digests
        self.store_factory = store_factory or (lambda node_id: MemoryStore())
        self.recover_nodes = recover_nodes
        self.trace_limit = trace_limit
        self.trace = Trace(seed=seed, scenario_name=scenario.name)
        self.now = 0
        self._seq = 0
        self.heap: list[_Event] = []
        self.registry = NamingRegistry()
        self.net_rng = random.Random(f"{seed}:net")
        self.timing = Timing(election_min=scenario.election_min,
                             election_max=scenario.election_max)

        self.nodes: dict[str, Node] = {}
        self.stores: dict[str, MemoryStore] = {}
        self.crashed: set = set()
        self.restart_counts: dict[str, int] = {}
        self._next_tick: dict[str, int] = {}

        self.partitions: list[dict] = []   # active windows, checked at send
        self.one_ways: list[dict] = []
        self.drop_windows: list[dict] = []
        self.dup_windows: list[dict] = []
        self.reorder_windows: list[dict] = []
        self.delay_min = 1 * MS
        self.delay_max = 5 * MS
        self.crash_triggers: list[dict] = []
        # Links are FIFO unless a reorder fault interferes; counters feed the
        # fault-model fidelity checks.
        self._link_clock: dict[tuple[str, str], int] = {}
        self.sent: dict[tuple[str, str], int] = {}
        self.delivered: dict[tuple[str, str], list[int]] = {}

        self.client = ClientActor(self)
        self.admin = AdminActor(self)

        self._build_topology()
        self._schedule_scenario()

    # ------------------------------------------------------------------
    # Setup

    def _node_rng(self, node_id: str) -> random.Random:
        gen = self.restart_counts.get(node_id, 0)
        return random.Random(f"{self.seed}:{node_id}:{gen}")

    def _observer_for(self, node_id: str) -> Callable[[str, dict], None]:
        def observe(kind: str, data: dict) -> None:
            node = self.nodes.get(node_id)
            digest = node.state_digest() if (node and self.collect_digests) else ""
            self.trace.add(TraceEvent(t=self.now, node=node_id, kind=kind,
                                      data=data, digest=digest))
            for trig in self.crash_triggers:
                if trig.get("done") or trig["event"] != kind:
                    continue
                want = trig.get("node", "$emitter")
                # "$emitter" crashes whoever raised the event; a literal node
                # crashes when the event first occurs anywhere.
                target = node_id if want == "$emitter" else want
                trig["done"] = True
                self._push(self.now + trig.get("delay", 0), "crash",
                           {"node": target})
        return observe

    def _build_topology(self) -> None:
        for spec in self.scn.clusters:
            cfg = stable_config(f"init:{spec.cluster_id}", spec.cluster_id,
                                spec.nodes, spec.key_range)
            self.registry.register(spec.cluster_id, spec.nodes, spec.key_range, 0)
            for node_id in spec.nodes:
                self._spawn(node_id, cfg)
        for node_id in self.scn.spare_nodes:
            cfg = stable_config(f"spare:{node_id}", f"spare:{node_id}",
                                [node_id], KeyRange(spans=()))
            self._spawn(node_id, cfg, passive=True)

    def _spawn(self, node_id: str, cfg, passive: bool = False) -> None:
        store = self.store_factory(node_id)
        self.stores[node_id] = store
        if self.recover_nodes:
            node = Node.recover(node_id, cfg, self.timing,
                                self._node_rng(node_id), store,
                                observer=self._observer_for(node_id),
                                registry=self.registry, now=self.now,
                                defects=self.defects)
            self.registry.register(node.cluster_id, node.members,
                                   node.key_range, node.cluster_epoch)
        else:
            node = Node(node_id, cfg, self.timing, self._node_rng(node_id),
                        store=store, observer=self._observer_for(node_id),
                        registry=self.registry, now=self.now,
                        defects=self.defects)
        self.nodes[node_id] = node
        if passive:
            node.deadlines.clear()
        node._emit_view()
        self._schedule_tick(node_id)

    def _schedule_scenario(self) -> None:
        for action in self.scn.workload:
            self._push(action.at, "action", action)
        for fault in self.scn.faults:
            self._load_fault(fault)

    def _load_fault(self, fault: Fault) -> None:
        a = fault.args
        if fault.kind == "delay":
            self.delay_min = int(a.get("min_ms", 1)) * MS
            self.delay_max = int(a.get("max_ms", 5)) * MS
        elif fault.kind in ("drop", "duplicate", "reorder"):
            window = {"from": int(a.get("from_ms", 0)) * MS,
                      "to": int(a.get("to_ms", self.scn.horizon // MS)) * MS,
                      "rate": float(a.get("rate", 0.0)),
                      "extra": int(a.get("extra_ms", 40)) * MS}
            {"drop": self.drop_windows, "duplicate": self.dup_windows,
             "reorder": self.reorder_windows}[fault.kind].append(window)
        elif fault.kind == "partition":
            self.partitions.append({
                "from": int(a.get("from_ms", 0)) * MS,
                "to": int(a.get("to_ms", self.scn.horizon // MS)) * MS,
                "groups": [frozenset(g) for g in a["groups"]]})
            self._push(int(a.get("from_ms", 0)) * MS, "mark",
                       {"kind": "partition_start", "groups": a["groups"]})
            self._push(int(a.get("to_ms", 0)) * MS, "mark",
                       {"kind": "partition_end", "groups": a["groups"]})
        elif fault.kind == "one_way":
            self.one_ways.append({"from": int(a.get("from_ms", 0)) * MS,
                                  "to": int(a.get("to_ms", 0)) * MS,
                                  "src": a["src"], "dst": a["dst"]})
        elif fault.kind == "crash":
            self._push(int(a["at_ms"]) * MS, "crash", {"node": a["node"]})
        elif fault.kind == "restart":
            self._push(int(a["at_ms"]) * MS, "restart", {"node": a["node"]})
        elif fault.kind == "crash_on":
            self.crash_triggers.append({"event": a["event"],
                                        "node": a.get("node", "$emitter"),
                                        "delay": int(a.get("delay_ms", 0)) * MS,
                                        "done": False})
        else:
            raise ValueError(f"unknown fault kind {fault.kind!r}")

    # ------------------------------------------------------------------
    # Event plumbing

    def _push(self, t: int, kind: str, payload: object) -> None:
        self._seq += 1
        heapq.heappush(self.heap, _Event(t=max(t, self.now), seq=self._seq,
                                         kind=kind, payload=payload))

    def emit(self, node: str, kind: str, data: dict) -> None:
        self.trace.add(TraceEvent(t=self.now, node=node, kind=kind, data=data))
        if self.trace_limit and len(self.trace.events) > self.trace_limit:
            del self.trace.events[:self.trace_limit // 2]

    def _schedule_tick(self, node_id: str) -> None:
        node = self.nodes.get(node_id)
        if node is None or node_id in self.crashed:
            return
        deadline = node.next_deadline()
        if deadline is None:
            return
        known = self._next_tick.get(node_id)
        if known is not None and known <= deadline and known >= self.now:
            return
        self._next_tick[node_id] = deadline
        self._push(deadline, "tick", node_id)

    def _drain(self, node_id: str) -> None:
        node = self.nodes.get(node_id)
        if node is None:
            return
        out, node.outbox = node.outbox, []
        for dst, msg in out:
            self._route(node_id, dst, msg)
        self._schedule_tick(node_id)

    def _route(self, src: str, dst: str, msg) -> None:
        if dst == CLIENT or dst.startswith("client"):
            self._push(self.now + self._base_delay(), "client_rx", (src, msg))
            return
        if dst == ADMIN:
            self._push(self.now + self._base_delay(), "admin_rx", (src, msg))
            return
        if src in (CLIENT, ADMIN):
            self._push(self.now + self._base_delay(), "deliver", (src, dst, msg))
            return
        # Node-to-node traffic runs the fault gauntlet, decided at send time.
        link = (src, dst)
        self.sent[link] = self.sent.get(link, 0) + 1
        seq_no = self.sent[link]
        if self._cut(src, dst):
            return
        if self._rate_hit(self.drop_windows):
            return
        copies = 1
        while self._rate_hit(self.dup_windows) and copies < 3:
            copies += 1
        for copy in range(copies):
            t = self.now + self._base_delay()
            reordered = False
            for w in self.reorder_windows:
                if w["from"] <= self.now < w["to"] and \
                        self.net_rng.random() < w["rate"]:
                    t += self.net_rng.randrange(1, max(w["extra"], 2))
                    reordered = True
            if copy == 0 and not reordered:
                # FIFO link: never overtake the previous in-order delivery.
                t = max(t, self._link_clock.get(link, 0) + 1)
                self._link_clock[link] = t
            self._push(t, "deliver", (src, dst, msg, seq_no))

    def _base_delay(self) -> int:
        if self.delay_max <= self.delay_min:
            return self.delay_min
        return self.net_rng.randrange(self.delay_min, self.delay_max)

    def _cut(self, src: str, dst: str) -> bool:
        for p in self.partitions:
            if p["from"] <= self.now < p["to"]:
                sg = dg = None
                for g in p["groups"]:
                    if src in g:
                        sg = g
                    if dst in g:
                        dg = g
                if sg is not None and dg is not None and sg is not dg:
                    return True
        for ow in self.one_ways:
            if ow["from"] <= self.now < ow["to"] and \
                    ow["src"] == src and ow["dst"] == dst:
                return True
        return False

    def _rate_hit(self, windows: list[dict]) -> bool:
        for w in windows:
            if w["from"] <= self.now < w["to"] and \
                    self.net_rng.random() < w["rate"]:
                return True
        return False

    # ------------------------------------------------------------------
    # Faults

    def _crash(self, node_id: str) -> None:
        if node_id in self.crashed or node_id not in self.nodes:
            return
        self.crashed.add(node_id)
        self.emit(SIM, "crash", {"node": node_id})

    def _restart(self, node_id: str) -> None:
        if node_id not in self.crashed:
            return
        self.crashed.discard(node_id)
        self.restart_counts[node_id] = self.restart_counts.get(node_id, 0) + 1
        store = self.stores[node_id]
        fallback = self._fallback_config(node_id)
        self.emit(SIM, "restart", {"node": node_id})
        node = Node.recover(node_id, fallback, self.timing,
                            self._node_rng(node_id), store,
                            observer=self._observer_for(node_id),
                            registry=self.registry, now=self.now,
                            defects=self.defects)
        self.nodes[node_id] = node
        node._emit_view()
        self._next_tick.pop(node_id, None)
        self._drain(node_id)

    def _fallback_config(self, node_id: str):
        for spec in self.scn.clusters:
            if node_id in spec.nodes:
                return stable_config(f"init:{spec.cluster_id}", spec.cluster_id,
                                     spec.nodes, spec.key_range)
        return stable_config(f"spare:{node_id}", f"spare:{node_id}", [node_id],
                             KeyRange(spans=()))

    # ------------------------------------------------------------------
    # Main loop

    def step_until(self, t: int) -> None:
        """Process every event due at or before `t` (service-mode driver)."""
        while self.heap and self.heap[0].t <= t:
            ev = heapq.heappop(self.heap)
            self.now = max(self.now, ev.t)
            self._dispatch(ev)
        self.now = max(self.now, t)

    def collect_final_states(self) -> None:
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            self.trace.final_states[node_id] = {
                "crashed": node_id in self.crashed,
                **node.status(),
                "state_digest": node.state_digest(),
                "kv": dict(sorted(node.kv.items())),
            }

    def run(self) -> Trace:
        while self.heap:
            ev = heapq.heappop(self.heap)
            if ev.t > self.scn.horizon:
                break
            self.now = max(self.now, ev.t)
            self._dispatch(ev)
        self.now = self.scn.horizon
        self.client.finish()
        self.collect_final_states()
        return self.trace

    def _dispatch(self, ev: _Event) -> None:
        kind = ev.kind
        if kind == "deliver":
            if len(ev.payload) == 4:
                src, dst, msg, seq_no = ev.payload
                self.delivered.setdefault((src, dst), []).append(seq_no)
            else:
                src, dst, msg = ev.payload
            if dst in self.crashed:
                return
            node = self.nodes.get(dst)
            if node is None:
                return
            node.on_message(msg, self.now)
            self._drain(dst)
        elif kind == "tick":
            node_id = ev.payload
            if node_id in self.crashed:
                return
            node = self.nodes.get(node_id)
            if node is None:
                return
            if self._next_tick.get(node_id) == ev.t:
                self._next_tick.pop(node_id, None)
            node.on_tick(self.now)
            self._drain(node_id)
        elif kind == "action":
            self._run_action(ev.payload)
        elif kind == "client_rx":
            src, msg = ev.payload
            self.client.on_message(src, msg)
        elif kind == "admin_rx":
            src, msg = ev.payload
            self.admin.on_message(src, msg)
        elif kind == "client_tick":
            self.client.on_tick(ev.payload)
        elif kind == "admin_tick":
            self.admin.on_tick(ev.payload)
        elif kind == "crash":
            self._crash(ev.payload["node"])
        elif kind == "restart":
            self._restart(ev.payload["node"])
        elif kind == "mark":
            data = dict(ev.payload)
            self.emit(SIM, data.pop("kind"), data)

    def _run_action(self, action: Action) -> None:
        if action.op in ("put", "get", "delete"):
            self.client.begin(action)
        elif action.op in ("split", "merge", "member_add", "member_remove",
                           "resize_quorum"):
            self.admin.begin(action)
        else:
            raise ValueError(f"unknown workload op {action.op!r}")


class ClientActor:
    """Scripted KV workload: routes by key, follows redirects, retries
    until success or the horizon."""

    RETRY = 400 * MS

    def __init__(self, sim: Simulation) -> None:
        self.sim = sim
        self.table = RouteTable()
        self.ops: dict[str, dict] = {}

    def submit(self, op_kind: str, key: str, value: str,
               callback) -> None:
        """Service-injected operation; `callback(status, value)` fires on
        completion (status 'ok') or when retries give up."""
        op_id = f"svc{len(self.ops)}"
        action = Action(at=self.sim.now, op=op_kind,
                        args={"key": key, "value": value}, op_id=op_id)
        self.ops[op_id] = {"action": action, "done": False, "attempt": 0,
                           "target": None, "callback": callback}
        self._attempt(op_id)

    def begin(self, action: Action) -> None:
        op = {"action": action, "done": False, "attempt": 0,
              "target": None}
        self.ops[action.op_id] = op
        self.sim.emit(CLIENT, "client_invoke", {
            "op_id": action.op_id, "op": action.op,
            "key": action.args.get("key", ""),
            "value": action.args.get("value", "")})
        self._attempt(action.op_id)

    def _attempt(self, op_id: str) -> None:
        op = self.ops.get(op_id)
        if op is None or op["done"]:
            return
        action = op["action"]
        key = action.args["key"]
        self.table.refresh(self.sim.registry)
        route = self.table.route(key)
        if route is None:
            self._schedule_retry(op_id)
            return
        candidates = [n for n in ([route.leader_hint] if route.leader_hint else [])
                      if n] + [n for n in route.members]
        target = None
        for cand in candidates:
            if cand in self.sim.nodes and cand not in self.sim.crashed:
                target = cand
                break
        if target is None:
            self._schedule_retry(op_id)
            return
        op["target"] = route.cluster_id
        op["attempt"] += 1
        from .. import wire
        kv_op = {"put": wire.KV_PUT, "get": wire.KV_GET,
                 "delete": wire.KV_DELETE}[action.op]
        payload = {"op": kv_op, "key": key}
        if action.op == "put":
            payload["value"] = action.args.get("value", "")
        self.sim._route(CLIENT, target,
                        ("client", payload, CLIENT, op_id))
        self._schedule_retry(op_id)

    def _schedule_retry(self, op_id: str) -> None:
        self.sim._push(self.sim.now + self.RETRY, "client_tick", op_id)

    def on_tick(self, op_id: str) -> None:
        op = self.ops.get(op_id)
        if op and not op["done"]:
            self._attempt(op_id)

    def on_message(self, src: str, msg) -> None:
        kind, op_id, payload = msg
        op = self.ops.get(op_id)
        if op is None or op["done"]:
            return
        if kind == "kv_ok":
            op["done"] = True
            self.sim.emit(CLIENT, "client_ok", {
                "op_id": op_id, "op": op["action"].op,
                "key": op["action"].args.get("key", ""),
                "value": payload,
                "cluster": op["target"] or ""})
            if op.get("callback") is not None:
                op["callback"]("ok", payload)
            return
        if kind == "kv_redirect":
            cluster = payload.get("cluster", "")
            leader = payload.get("leader", "")
            if cluster and leader:
                self.table.set_leader_hint(cluster, leader)
            if payload.get("reason") == "not_leader" and leader \
                    and leader not in self.sim.crashed:
                # Chase the hint immediately; timers cover the rest.
                op["attempt"] += 1
                action = op["action"]
                from .. import wire
                kv_op = {"put": wire.KV_PUT, "get": wire.KV_GET,
                         "delete": wire.KV_DELETE}[action.op]
                body = {"op": kv_op, "key": action.args["key"]}
                if action.op == "put":
                    body["value"] = action.args.get("value", "")
                self.sim._route(CLIENT, leader, ("client", body, CLIENT, op_id))

    def finish(self) -> None:
        for op_id in sorted(self.ops):
            op = self.ops[op_id]
            if not op["done"]:
                self.sim.emit(CLIENT, "client_unfinished", {
                    "op_id": op_id, "op": op["action"].op,
                    "key": op["action"].args.get("key", "")})


class AdminActor:
    """Scripted reconfigurations: finds the target cluster's leader,
    retries through rejections, and watches the trace for completion."""

    RETRY = 500 * MS

    def __init__(self, sim: Simulation) -> None:
        self.sim = sim
        self.cmds: dict[str, dict] = {}

    def submit(self, op_kind: str, args: dict, callback) -> None:
        op_id = f"svcadm{len(self.cmds)}"
        action = Action(at=self.sim.now, op=op_kind, args=args, op_id=op_id)
        self.cmds[op_id] = {"action": action, "done": False, "hint": None,
                            "callback": callback}
        self._attempt(op_id)

    def begin(self, action: Action) -> None:
        cmd = {"action": action, "done": False, "hint": None}
        self.cmds[action.op_id] = cmd
        self.sim.emit(ADMIN, "admin_invoke", {
            "op_id": action.op_id, "op": action.op, **_admin_args(action)})
        self._attempt(action.op_id)

    def _verb(self, action: Action) -> dict:
        if action.op == "split":
            subs = [{"cluster_id": s["id"], "members": list(s["nodes"]),
                     "range": [[s["range"][0] or "", s["range"][1]]]}
                    for s in action.args["subclusters"]]
            return {"verb": "split", "subclusters": subs}
        if action.op == "merge":
            return {"verb": "merge", "clusters": list(action.args["clusters"]),
                    "resume_members": list(action.args.get("resume", []))}
        if action.op == "member_add":
            return {"verb": "member_add", "nodes": list(action.args["nodes"])}
        if action.op == "member_remove":
            return {"verb": "member_remove", "nodes": list(action.args["nodes"])}
        return {"verb": "resize_quorum"}

    def _target_members(self, action: Action) -> list[str]:
        cluster = action.args.get("cluster") or action.args.get("coordinator")
        entry = self.sim.registry.get(cluster)
        if entry is not None:
            return list(entry.members)
        return []

    def _attempt(self, op_id: str) -> None:
        cmd = self.cmds.get(op_id)
        if cmd is None or cmd["done"]:
            return
        if self._completed(cmd):
            cmd["done"] = True
            self.sim.emit(ADMIN, "admin_done", {"op_id": op_id,
                                                "op": cmd["action"].op})
            return
        members = self._target_members(cmd["action"])
        targets = ([cmd["hint"]] if cmd["hint"] else []) + members
        target = next((t for t in targets
                       if t in self.sim.nodes and t not in self.sim.crashed),
                      None)
        if target is not None:
            self.sim._route(ADMIN, target,
                            ("admin", self._verb(cmd["action"]), ADMIN, op_id))
        self.sim._push(self.sim.now + self.RETRY, "admin_tick", op_id)

    def on_tick(self, op_id: str) -> None:
        self._attempt(op_id)

    def on_message(self, src: str, msg) -> None:
        kind, op_id, payload = msg
        cmd = self.cmds.get(op_id)
        if cmd is None or cmd["done"]:
            return
        if kind == "admin_err":
            hint = payload.get("leader_hint", "")
            if hint:
                cmd["hint"] = hint
        self.sim.emit(ADMIN, "admin_response", {
            "op_id": op_id, "ok": kind == "admin_ok", **payload})
        cb = cmd.get("callback")
        if cb is not None and (kind == "admin_ok"
                               or payload.get("why") != "not_leader"):
            # Service-injected commands report the proposal outcome once;
            # leadership redirects keep retrying silently.
            cmd["callback"] = None
            cmd["done"] = True
            cb(kind == "admin_ok", payload)

    def _completed(self, cmd: dict) -> bool:
        action = cmd["action"]
        if action.op == "split":
            want = {s["id"] for s in action.args["subclusters"]}
            seen = {e.data.get("cluster") for e in
                    self.sim.trace.of_kind("split_new_committed")}
            return want <= seen
        if action.op == "merge":
            merged = "+".join(sorted(action.args["clusters"]))
            for e in self.sim.trace.of_kind("merged_resumed"):
                if e.data.get("cluster") == merged:
                    return True
            return False
        if action.op in ("member_add", "member_remove"):
            cluster = action.args["cluster"]
            entry = self.sim.registry.get(cluster)
            base = set(self._initial_members(cluster))
            if action.op == "member_add":
                want = base | set(action.args["nodes"])
            else:
                want = base - set(action.args["nodes"])
            for e in self.sim.trace.of_kind("member_change_done"):
                if set(e.data.get("members", [])) == want:
                    return True
            return False
        if action.op == "resize_quorum":
            return any(self.sim.trace.of_kind("member_change_done"))
        return False

    def _initial_members(self, cluster: str) -> list[str]:
        for spec in self.sim.scn.clusters:
            if spec.cluster_id == cluster:
                return list(spec.nodes)
        entry = self.sim.registry.get(cluster)
        return list(entry.members) if entry else []


def _admin_args(action: Action) -> dict:
    out = {}
    for k, v in action.args.items():
        if k == "subclusters":
            out[k] = [{"id": s["id"], "nodes": list(s["nodes"])} for s in v]
        else:
            out[k] = v
    return out


def run_scenario(scenario: Scenario, seed: int,
                 defects: frozenset = frozenset(),
                 collect_digests: bool = True) -> Trace:
    return Simulation(scenario, seed, defects=defects,
                      collect_digests=collect_digests).run()
