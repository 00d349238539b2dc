"""Trace records: the ordered event stream a simulation produces.

Every event carries virtual time (integer microseconds), the acting node
(actors use ``client``/``admin``, the harness itself ``$sim``), a kind, a
data dict, and the acting node's state digest at emission.  Identical
(seed, scenario) pairs produce byte-identical serialized traces.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional


@dataclass
class TraceEvent:
    t: int
    node: str
    kind: str
    data: dict
    digest: str = ""
    seq: int = 0

    def to_obj(self) -> dict:
        return {"t": self.t, "seq": self.seq, "node": self.node,
                "kind": self.kind, "digest": self.digest, "data": self.data}

    @staticmethod
    def from_obj(obj: dict) -> "TraceEvent":
        return TraceEvent(t=obj["t"], node=obj["node"], kind=obj["kind"],
                          data=obj["data"], digest=obj.get("digest", ""),
                          seq=obj.get("seq", 0))


@dataclass
class Trace:
    seed: int
    scenario_name: str
    events: list[TraceEvent] = field(default_factory=list)
    final_states: dict[str, dict] = field(default_factory=dict)

    def add(self, event: TraceEvent) -> None:
        event.seq = len(self.events)
        self.events.append(event)

    def of_kind(self, *kinds: str) -> list[TraceEvent]:
        want = set(kinds)
        return [e for e in self.events if e.kind in want]

    def serialize(self) -> str:
        lines = [json.dumps({"kind": "header", "seed": self.seed,
                             "scenario": self.scenario_name},
                            sort_keys=True, separators=(",", ":"))]
        for e in self.events:
            lines.append(json.dumps(e.to_obj(), sort_keys=True,
                                    separators=(",", ":")))
        lines.append(json.dumps({"kind": "final", "states": self.final_states},
                                sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.serialize())

    @staticmethod
    def load(path: str) -> "Trace":
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        header = json.loads(lines[0])
        trace = Trace(seed=header.get("seed", 0),
                      scenario_name=header.get("scenario", ""))
        for line in lines[1:]:
            obj = json.loads(line)
            if obj.get("kind") == "final":
                trace.final_states = obj.get("states", {})
                continue
            trace.events.append(TraceEvent.from_obj(obj))
        return trace
