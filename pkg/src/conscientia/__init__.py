"""Deterministic simulator and protocol library for peer-group service overlays."""

from .entrypoint import SubgroupLoad, WorkerLoad, select_worker, select_worker_group
from .errors import ParseError, SimulationError
from .kernel import Kernel, NetworkModel, Rng
from .runtime import Simulation
from .scenario import Scenario, load_scenario, parse_scenario, validate_scenario
from .trace import MetricsReport, parse_trace, serialize_trace, summarize
from .worker import update_threshold

__all__ = [
    "Kernel", "MetricsReport", "NetworkModel", "ParseError", "Rng", "Scenario",
    "Simulation", "SimulationError", "SubgroupLoad", "WorkerLoad", "load_scenario",
    "parse_scenario", "parse_trace", "select_worker", "select_worker_group",
    "serialize_trace", "summarize", "update_threshold", "validate_scenario",
]
