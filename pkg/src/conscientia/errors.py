"""Exception types shared across the simulator."""

from __future__ import annotations


class SimulationError(Exception):
    """Base class for errors raised by the simulator."""


class SchedulingInPast(SimulationError):
    pass


class UnknownPeer(SimulationError):
    pass


class OverlappingSets(SimulationError):
    pass


class GroupNotVisible(SimulationError):
    pass


class ParentNotJoined(SimulationError):
    pass


class NotAMember(SimulationError):
    pass


class RvDead(SimulationError):
    pass


class NoCandidates(SimulationError):
    pass


class NoWorkersAlive(SimulationError):
    pass


class AllSaturated(SimulationError):
    pass


class DuplicateQueryId(SimulationError):
    pass


class MalformedQuery(SimulationError):
    pass


class NoEligibleHost(SimulationError):
    pass


class MalformedTrace(SimulationError):
    pass


class ParseError(SimulationError):
    """Scenario document could not be parsed.

    ``line`` is 1-based when known; ``field`` is a dotted path such as
    ``services[0].workers``.
    """

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.message = message
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field {field}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class UnknownField(ParseError):
    pass
