"""The service runtime: the deterministic engine paced by the wall clock.

One background thread owns the whole deployment (every node of every
cluster runs in-process) and advances the event loop to "now" a few
hundred times per second.  HTTP handlers inject client and admin
operations through a thread-safe queue and wait on an event for the
response.  With a data directory, each node persists through the same
file-backed store the recovery path reads, so a restarted service picks
its clusters back up.
"""

from __future__ import annotations

import os
import threading
import time
from typing import Optional

from ..simnet.scenario import MS, Scenario, scenario_from_obj
from ..simnet.sim import Simulation
from ..storage import FileStore, MemoryStore
from .. import wire


class PendingCall:
    def __init__(self) -> None:
        self.event = threading.Event()
        self.result = None

    def resolve(self, result) -> None:
        self.result = result
        self.event.set()

    def wait(self, timeout: float):
        if not self.event.wait(timeout):
            return None
        return self.result


class ServiceRuntime:
    """Drives a deployment in real time and serializes external access."""

    TICK_SECONDS = 0.002

    def __init__(self, topology: dict, seed: int = 0,
                 data_dir: Optional[str] = None, rejoin: bool = False,
                 trace_out: Optional[str] = None) -> None:
        scenario = scenario_from_obj({
            "name": topology.get("name", "service"),
            "horizon_ms": 1,  # unused; the runtime steps by wall clock
            "clusters": topology["clusters"],
            "spare_nodes": topology.get("spare_nodes", []),
            "workload": [],
            "faults": [],
            "timing": topology.get("timing", {}),
        })
        factory = None
        if data_dir:
            os.makedirs(data_dir, exist_ok=True)
            factory = lambda node_id: FileStore(os.path.join(data_dir, node_id))
        self.sim = Simulation(scenario, seed=seed, collect_digests=False,
                              store_factory=factory, recover_nodes=rejoin,
                              trace_limit=20000)
        self.trace_out = trace_out
        self._lock = threading.Lock()
        self._inbox: list = []
        self._started = time.monotonic()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True,
                                        name="deployment-loop")

    def start(self) -> "ServiceRuntime":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2)
        if self.trace_out:
            with self._lock:
                self.sim.collect_final_states()
                self.sim.trace.save(self.trace_out)

    def _now_us(self) -> int:
        return int((time.monotonic() - self._started) * 1_000_000)

    def _loop(self) -> None:
        while not self._stop.is_set():
            with self._lock:
                inbox, self._inbox = self._inbox, []
                for kind, payload, call in inbox:
                    self._inject(kind, payload, call)
                self.sim.step_until(self._now_us())
            time.sleep(self.TICK_SECONDS)

    def _inject(self, kind: str, payload: dict, call: PendingCall) -> None:
        if kind == "kv":
            self.sim.client.submit(
                payload["op"], payload["key"], payload.get("value", ""),
                lambda status, value: call.resolve({"status": status,
                                                    "value": value}))
        elif kind == "admin":
            self.sim.admin.submit(
                payload["op"], payload["args"],
                lambda ok, detail: call.resolve({"ok": ok, **detail}))

    def _call(self, kind: str, payload: dict, timeout: float) -> dict:
        call = PendingCall()
        with self._lock:
            self._inbox.append((kind, payload, call))
        result = call.wait(timeout)
        if result is None:
            return {"status": "timeout"}
        return result

    # ------------------------------------------------------------------
    # Public surface (thread-safe)

    def kv(self, op: str, key: str, value: str = "",
           timeout: float = 5.0) -> dict:
        return self._call("kv", {"op": op, "key": key, "value": value}, timeout)

    def kv_raw(self, frame: bytes, timeout: float = 5.0) -> bytes:
        """The length-prefixed KV client protocol, served over one request."""
        try:
            rec, _ = wire.decode_kv_record(frame)
        except wire.WireError as exc:
            return wire.encode_kv_error(1, str(exc))
        op = {wire.KV_PUT: "put", wire.KV_GET: "get",
              wire.KV_DELETE: "delete"}.get(rec["op"])
        if op is None:
            return wire.encode_kv_error(2, f"bad request tag {rec['op']}")
        result = self.kv(op, rec["key"], rec.get("value", ""), timeout)
        if result.get("status") == "ok":
            return wire.encode_kv_ok(result.get("value"))
        return wire.encode_kv_error(3, result.get("status", "error"))

    def admin(self, op: str, args: dict, timeout: float = 5.0) -> dict:
        return self._call("admin", {"op": op, "args": args}, timeout)

    def status(self) -> dict:
        with self._lock:
            nodes = {nid: node.status()
                     for nid, node in sorted(self.sim.nodes.items())}
            naming = [e.to_obj() for e in self.sim.registry.list_all()]
        clusters: dict = {}
        for nid, st in nodes.items():
            info = clusters.setdefault(st["cluster"], {
                "cluster": st["cluster"], "epoch": st["epoch"],
                "members": st["members"], "range": st["range"],
                "leader": "", "config_kind": st["config_kind"], "nodes": []})
            info["nodes"].append(nid)
            info["epoch"] = max(info["epoch"], st["epoch"])
            if st["role"] == "leader":
                info["leader"] = nid
        return {"nodes": nodes, "clusters": list(clusters.values()),
                "naming": naming}

    def node_history(self, node_id: str) -> list[dict]:
        with self._lock:
            node = self.sim.nodes.get(node_id)
            if node is None:
                return []
            return node.history.to_objs()

    def naming_lookup(self, lo: str, hi: Optional[str]) -> list[dict]:
        from ..types import KeyRange
        with self._lock:
            entries = self.sim.registry.lookup_range(KeyRange.single(lo, hi))
            return [e.to_obj() for e in entries]
