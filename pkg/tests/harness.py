"""A tiny synchronous harness: real nodes, lossless instant links, manual
clock.  Pumping delivers every queued message until the system is quiet,
which makes protocol unit tests deterministic without the full simulator."""

from __future__ import annotations

import random

from shardraft.node import Node, Timing
from shardraft.recovery import NamingRegistry
from shardraft.storage import MemoryStore
from shardraft.types import KeyRange, stable_config

TICK = 10_000  # microseconds per pump round


class Net:
    def __init__(self, clusters: dict[str, list[str]],
                 ranges: dict[str, KeyRange] | None = None,
                 defects: frozenset = frozenset()) -> None:
        self.now = 0
        self.registry = NamingRegistry()
        self.nodes: dict[str, Node] = {}
        self.stores: dict[str, MemoryStore] = {}
        self.events: list[tuple[str, str, dict]] = []
        self.client_replies: list[tuple[str, tuple]] = []
        self.down: set[str] = set()
        for cluster_id, members in clusters.items():
            key_range = (ranges or {}).get(cluster_id, KeyRange.single("", None))
            cfg = stable_config(f"init:{cluster_id}", cluster_id, members, key_range)
            self.registry.register(cluster_id, members, key_range, 0)
            for node_id in members:
                store = MemoryStore()
                self.stores[node_id] = store
                node = Node(node_id, cfg, Timing(), random.Random(node_id),
                            store=store, registry=self.registry,
                            defects=defects,
                            observer=self._observer(node_id))
                node.deadlines.clear()  # tests trigger elections explicitly
                self.nodes[node_id] = node

    def _observer(self, node_id: str):
        def observe(kind: str, data: dict) -> None:
            self.events.append((node_id, kind, data))
        return observe

    def crash(self, node_id: str) -> None:
        self.down.add(node_id)

    def restart(self, node_id: str) -> Node:
        self.down.discard(node_id)
        old = self.nodes[node_id]
        cfg = stable_config("fallback", old.cluster_id, old.members, old.key_range)
        node = Node.recover(node_id, cfg, Timing(), random.Random(node_id + "r"),
                            self.stores[node_id], registry=self.registry,
                            observer=self._observer(node_id), now=self.now)
        node.deadlines.clear()
        self.nodes[node_id] = node
        return node

    def pump(self, rounds: int = 50, drop=None) -> None:
        """Deliver queued traffic until quiet (or `rounds` exhausted).
        `drop(src, dst, msg)` can suppress individual messages."""
        for _ in range(rounds):
            moved = False
            for node_id in sorted(self.nodes):
                node = self.nodes[node_id]
                out, node.outbox = node.outbox, []
                for dst, msg in out:
                    if dst.startswith("client") or dst == "admin":
                        self.client_replies.append((dst, msg))
                        continue
                    if node_id in self.down or dst in self.down:
                        continue
                    if drop is not None and drop(node_id, dst, msg):
                        continue
                    target = self.nodes.get(dst)
                    if target is not None:
                        target.on_message(msg, self.now)
                        moved = True
            if not moved:
                return

    def tick_all(self, advance: int = TICK) -> None:
        self.now += advance
        for node_id in sorted(self.nodes):
            if node_id not in self.down:
                self.nodes[node_id].on_tick(self.now)

    def settle(self, rounds: int = 30) -> None:
        for _ in range(rounds):
            self.pump()
            self.tick_all()
        self.pump()

    def elect(self, node_id: str) -> Node:
        node = self.nodes[node_id]
        node.start_election()
        self.pump()
        assert node.is_leader(), f"{node_id} failed to win: {node.role}"
        return node

    def leader_of(self, cluster_id: str) -> Node | None:
        for node in self.nodes.values():
            if node.cluster_id == cluster_id and node.is_leader() \
                    and node.id not in self.down:
                return node
        return None

    def events_of(self, kind: str) -> list[tuple[str, dict]]:
        return [(n, d) for (n, k, d) in self.events if k == kind]
