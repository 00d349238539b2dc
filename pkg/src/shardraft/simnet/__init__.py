"""Seeded deterministic discrete-event simulation of multi-cluster
deployments, with fault injection and trace oracles."""

from .scenario import Scenario, load_scenario, scenario_from_obj
from .sim import Simulation, run_scenario
from .trace import Trace, TraceEvent
from .oracles import check_safety, check_liveness, check_linearizable_reads

__all__ = [
    "Scenario", "load_scenario", "scenario_from_obj", "Simulation",
    "run_scenario", "Trace", "TraceEvent", "check_safety", "check_liveness",
    "check_linearizable_reads",
]
