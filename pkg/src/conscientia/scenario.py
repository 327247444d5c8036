"""Scenario documents: parsing, validation and serialization.

Scenarios are YAML. Top-level keys: ``name``, ``seed``, ``networks``,
``peers``, ``services``, ``workload``, ``timeline`` and ``params``; see the
README for a full example. Unknown keys are rejected.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Any

import yaml

from .errors import ParseError, UnknownField

ROLES = ("rendezvous", "worker", "client")
ACTIONS = ("kill_peer", "revive_peer", "partition", "heal", "inject_load")
LINK_DEFAULTS = {"intra_subgroup": 2, "inter_subgroup": 5, "inter_network": 20}


@dataclass
class Network:
    name: str
    latency: dict[str, int] = field(default_factory=lambda: dict(LINK_DEFAULTS))


@dataclass
class PeerSpec:
    id: int
    network: str
    role: str = "worker"
    spare: bool = False


@dataclass
class ServiceSpec:
    name: str
    category: list[str]
    workers: list[int]
    query_format: str = ".*"
    # (lo, hi) in ms; lo == hi means constant
    service_time: tuple[int, int] = (100, 100)
    t_initial: int = 10
    x: int = 2
    t_min: int = 1


@dataclass
class WorkloadSpec:
    client: int
    service: str
    count: int
    start: int = 0
    interval: int | None = 1000
    schedule: list[int] | None = None
    payload: str = "q"


@dataclass
class TimelineEvent:
    at: int
    action: str
    peer: int | None = None
    sets: list[list[int]] | None = None
    service: str | None = None
    multiplier: int | None = None
    duration: int | None = None


@dataclass
class Params:
    r_max: int = 16
    heartbeat_period: int = 500
    k: int = 3
    exchange_interval: int = 1000
    election_delay: int = 100
    rv_wait_timeout: int | None = None
    jitter_max: int = 0
    loss_prob: Fraction = Fraction(0)
    discovery_timeout: int = 100
    saturation_slots: int = 3
    consolidation: bool = False
    r_min: int = 2
    duration: int = 60000

    def __post_init__(self) -> None:
        if self.rv_wait_timeout is None:
            self.rv_wait_timeout = 2 * self.k * self.heartbeat_period


@dataclass
class Scenario:
    name: str
    seed: int = 0
    networks: list[Network] = field(default_factory=list)
    peers: list[PeerSpec] = field(default_factory=list)
    services: list[ServiceSpec] = field(default_factory=list)
    workload: list[WorkloadSpec] = field(default_factory=list)
    timeline: list[TimelineEvent] = field(default_factory=list)
    params: Params = field(default_factory=Params)

    def peer(self, pid: int) -> PeerSpec:
        return next(p for p in self.peers if p.id == pid)

    def service(self, name: str) -> ServiceSpec:
        return next(s for s in self.services if s.name == name)


# -- parsing ---------------------------------------------------------------


def _line_index(node: yaml.Node, path: str = "", out: dict | None = None) -> dict[str, int]:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            sub = f"{path}.{k.value}" if path else str(k.value)
            out[sub] = k.start_mark.line + 1
            _line_index(v, sub, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, f"{path}[{i}]", out)
    return out


class _Reader:
    def __init__(self, lines: dict[str, int]) -> None:
        self.lines = lines

    def fail(self, path: str, msg: str, cls=ParseError):
        line = self.lines.get(path)
        while line is None and path:
            path = path.rsplit(".", 1)[0] if "." in path else ""
            line = self.lines.get(path)
        raise cls(msg, line=line, field=path or None)

    def mapping(self, value: Any, path: str, allowed) -> dict:
        if not isinstance(value, dict):
            self.fail(path, "expected a mapping")
        for key in value:
            if key not in allowed:
                sub = f"{path}.{key}" if path else str(key)
                self.fail(sub, f"unknown field {key!r}", UnknownField)
        return value

    def seq(self, value: Any, path: str) -> list:
        if value is None:
            return []
        if not isinstance(value, list):
            self.fail(path, "expected a list")
        return value

    def int_(self, value: Any, path: str, *, minimum: int | None = 0) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(path, f"expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            self.fail(path, f"must be >= {minimum}")
        return value

    def str_(self, value: Any, path: str) -> str:
        if not isinstance(value, str):
            self.fail(path, f"expected text, got {value!r}")
        return value

    def required(self, m: dict, key: str, path: str):
        if key not in m:
            self.fail(path, f"missing required field {key!r}")
        return m[key]


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def parse_scenario(document: str) -> Scenario:
    """Parse a YAML scenario document. Raises ParseError / UnknownField."""
    try:
        node = yaml.compose(document, Loader=yaml.SafeLoader)
        data = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(str(getattr(exc, "problem", exc)),
                         line=mark.line + 1 if mark else None) from None
    if node is None:
        raise ParseError("empty document", line=1)
    r = _Reader(_line_index(node))
    top = r.mapping(data, "", _names(Scenario))
    sc = Scenario(name=r.str_(r.required(top, "name", ""), "name"))
    if "seed" in top:
        sc.seed = r.int_(top["seed"], "seed")
        if sc.seed >= 2**64:
            r.fail("seed", "seed must fit in 64 bits")

    for i, n in enumerate(r.seq(top.get("networks"), "networks")):
        p = f"networks[{i}]"
        m = r.mapping(n, p, _names(Network))
        lat = dict(LINK_DEFAULTS)
        for k, v in r.mapping(m.get("latency", {}), f"{p}.latency", LINK_DEFAULTS).items():
            lat[k] = r.int_(v, f"{p}.latency.{k}", minimum=1)
        sc.networks.append(Network(r.str_(r.required(m, "name", p), f"{p}.name"), lat))

    for i, n in enumerate(r.seq(top.get("peers"), "peers")):
        p = f"peers[{i}]"
        m = r.mapping(n, p, _names(PeerSpec))
        role = r.str_(m.get("role", "worker"), f"{p}.role")
        if role not in ROLES:
            r.fail(f"{p}.role", f"role must be one of {ROLES}")
        spare = m.get("spare", False)
        if not isinstance(spare, bool):
            r.fail(f"{p}.spare", "expected true/false")
        sc.peers.append(PeerSpec(r.int_(r.required(m, "id", p), f"{p}.id"),
                                 r.str_(m.get("network", "default"), f"{p}.network"), role, spare))

    for i, n in enumerate(r.seq(top.get("services"), "services")):
        p = f"services[{i}]"
        m = r.mapping(n, p, _names(ServiceSpec))
        cats = [r.str_(c, f"{p}.category[{j}]")
                for j, c in enumerate(r.seq(r.required(m, "category", p), f"{p}.category"))]
        if not cats:
            r.fail(f"{p}.category", "a service needs at least one category")
        workers = [r.int_(w, f"{p}.workers[{j}]")
                   for j, w in enumerate(r.seq(m.get("workers"), f"{p}.workers"))]
        qf = r.str_(m.get("query_format", ".*"), f"{p}.query_format")
        try:
            re.compile(qf)
        except re.error as exc:
            r.fail(f"{p}.query_format", f"bad pattern: {exc}")
        st = _service_time(r, m.get("service_time", {"constant": 100}), f"{p}.service_time")
        sc.services.append(ServiceSpec(
            r.str_(r.required(m, "name", p), f"{p}.name"), cats, workers, qf, st,
            r.int_(m.get("t_initial", 10), f"{p}.t_initial"),
            r.int_(m.get("x", 2), f"{p}.x", minimum=1),
            r.int_(m.get("t_min", 1), f"{p}.t_min")))

    for i, n in enumerate(r.seq(top.get("workload"), "workload")):
        p = f"workload[{i}]"
        m = r.mapping(n, p, _names(WorkloadSpec))
        sched = None
        interval = None
        if "schedule" in m:
            sched = [r.int_(t, f"{p}.schedule[{j}]") for j, t in enumerate(r.seq(m["schedule"], f"{p}.schedule"))]
            if "interval" in m:
                r.fail(f"{p}.interval", "give either interval or schedule, not both")
        else:
            interval = r.int_(m.get("interval", 1000), f"{p}.interval", minimum=1)
        count = r.int_(m.get("count", len(sched) if sched is not None else 1), f"{p}.count")
        sc.workload.append(WorkloadSpec(
            r.int_(r.required(m, "client", p), f"{p}.client"),
            r.str_(r.required(m, "service", p), f"{p}.service"),
            count, r.int_(m.get("start", 0), f"{p}.start"), interval, sched,
            r.str_(m.get("payload", "q"), f"{p}.payload")))

    if "params" in top:
        m = r.mapping(top["params"], "params", _names(Params))
        kw = {}
        for k, v in m.items():
            if k == "loss_prob":
                try:
                    frac = Fraction(str(v))
                except (ValueError, ZeroDivisionError):
                    r.fail("params.loss_prob", f"not a rational: {v!r}")
                if not 0 <= frac <= 1:
                    r.fail("params.loss_prob", "must be within [0, 1]")
                kw[k] = frac
            elif k == "consolidation":
                if not isinstance(v, bool):
                    r.fail("params.consolidation", "expected true/false")
                kw[k] = v
            else:
                kw[k] = r.int_(v, f"params.{k}", minimum=1 if k not in ("jitter_max",) else 0)
        sc.params = Params(**kw)

    declared = {p.id for p in sc.peers}
    services = {s.name for s in sc.services}
    for i, n in enumerate(r.seq(top.get("timeline"), "timeline")):
        p = f"timeline[{i}]"
        m = r.mapping(n, p, _names(TimelineEvent))
        action = r.str_(r.required(m, "action", p), f"{p}.action")
        if action not in ACTIONS:
            r.fail(f"{p}.action", f"action must be one of {ACTIONS}")
        ev = TimelineEvent(r.int_(r.required(m, "at", p), f"{p}.at"), action)
        if action in ("kill_peer", "revive_peer"):
            ev.peer = r.int_(r.required(m, "peer", p), f"{p}.peer")
            if ev.peer not in declared:
                r.fail(f"{p}.peer", f"undeclared peer {ev.peer}")
        elif action == "partition":
            ev.sets = []
            for j, s in enumerate(r.seq(r.required(m, "sets", p), f"{p}.sets")):
                ids = [r.int_(x, f"{p}.sets[{j}]") for x in r.seq(s, f"{p}.sets[{j}]")]
                for x in ids:
                    if x not in declared:
                        r.fail(f"{p}.sets[{j}]", f"undeclared peer {x}")
                ev.sets.append(ids)
        elif action == "inject_load":
            ev.service = r.str_(r.required(m, "service", p), f"{p}.service")
            if ev.service not in services:
                r.fail(f"{p}.service", f"undeclared service {ev.service!r}")
            ev.multiplier = r.int_(r.required(m, "multiplier", p), f"{p}.multiplier", minimum=1)
            ev.duration = r.int_(r.required(m, "duration", p), f"{p}.duration", minimum=1)
        sc.timeline.append(ev)
    return sc


def _service_time(r: _Reader, value: Any, path: str) -> tuple[int, int]:
    m = r.mapping(value, path, {"constant", "uniform"})
    if len(m) != 1:
        r.fail(path, "give exactly one of constant or uniform")
    if "constant" in m:
        c = r.int_(m["constant"], f"{path}.constant", minimum=1)
        return (c, c)
    bounds = r.seq(m["uniform"], f"{path}.uniform")
    if len(bounds) != 2:
        r.fail(f"{path}.uniform", "expected [lo, hi]")
    lo = r.int_(bounds[0], f"{path}.uniform[0]", minimum=1)
    hi = r.int_(bounds[1], f"{path}.uniform[1]", minimum=1)
    if lo > hi:
        r.fail(f"{path}.uniform", "lo must not exceed hi")
    return (lo, hi)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# -- validation ------------------------------------------------------------


def validate_scenario(s: Scenario) -> list[str]:
    """Semantic checks; returns a list of violations (empty when ok)."""
    out: list[str] = []
    seen: set[int] = set()
    for p in s.peers:
        if p.id in seen:
            out.append(f"duplicate peer id {p.id}")
        seen.add(p.id)
    nets = {n.name for n in s.networks}
    if len(nets) != len(s.networks):
        out.append("duplicate network name")
    for p in s.peers:
        if nets and p.network not in nets:
            out.append(f"peer {p.id} on undeclared network {p.network!r}")
    names = [sv.name for sv in s.services]
    if len(set(names)) != len(names):
        out.append("duplicate service name")
    hosting: dict[int, str] = {}
    for sv in s.services:
        if not sv.workers:
            out.append(f"service {sv.name!r} has no workers")
        if sv.t_min < 1:
            out.append(f"service {sv.name!r}: t_min must be >= 1")
        if sv.t_initial < max(sv.t_min, 1):
            out.append(f"service {sv.name!r}: t_initial {sv.t_initial} below t_min {sv.t_min}")
        for j, w in enumerate(sv.workers):
            if w not in seen:
                out.append(f"service {sv.name!r}: worker {w} is not a declared peer")
                continue
            if w in hosting:
                out.append(f"peer {w} hosts both {hosting[w]!r} and {sv.name!r}")
            hosting[w] = sv.name
            role = s.peer(w).role
            if role == "client":
                out.append(f"service {sv.name!r}: worker {w} has role client")
            if role == "rendezvous" and j != 0:
                out.append(f"service {sv.name!r}: rendezvous peer {w} must be listed first")
    for p in s.peers:
        if p.spare and p.id in hosting:
            out.append(f"spare peer {p.id} is listed as a worker of {hosting[p.id]!r}")
    for wl in s.workload:
        if wl.client not in seen:
            out.append(f"workload client {wl.client} is not a declared peer")
        elif s.peer(wl.client).role != "client":
            out.append(f"workload peer {wl.client} is not a client")
        if wl.service not in names:
            out.append(f"workload references undeclared service {wl.service!r}")
        elif not re.fullmatch(s.service(wl.service).query_format, wl.payload):
            out.append(f"workload payload {wl.payload!r} does not match {wl.service!r} query_format")
        if wl.schedule is not None and wl.schedule != sorted(wl.schedule):
            out.append(f"workload for client {wl.client}: schedule not sorted")
    last = 0
    for ev in s.timeline:
        if ev.at < last:
            out.append(f"timeline time {ev.at} goes backwards")
        last = max(last, ev.at)
        if ev.sets is not None:
            flat = [x for group in ev.sets for x in group]
            if len(flat) != len(set(flat)):
                out.append(f"partition at {ev.at} has overlapping sets")
    if s.params.k < 1 or s.params.r_max < 1:
        out.append("params k and r_max must be >= 1")
    return out


# -- serialization ---------------------------------------------------------


def scenario_to_dict(s: Scenario) -> dict:
    d: dict[str, Any] = {"name": s.name, "seed": s.seed}
    d["networks"] = [asdict(n) for n in s.networks]
    d["peers"] = [asdict(p) for p in s.peers]
    d["services"] = []
    for sv in s.services:
        item = asdict(sv)
        lo, hi = sv.service_time
        item["service_time"] = {"constant": lo} if lo == hi else {"uniform": [lo, hi]}
        d["services"].append(item)
    d["workload"] = []
    for wl in s.workload:
        item = asdict(wl)
        if wl.schedule is None:
            del item["schedule"]
        else:
            del item["interval"]
        d["workload"].append(item)
    d["timeline"] = [{k: v for k, v in asdict(ev).items() if v is not None} for ev in s.timeline]
    params = asdict(s.params)
    params["loss_prob"] = str(s.params.loss_prob)
    d["params"] = params
    return d


def serialize_scenario(s: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(s), sort_keys=False, default_flow_style=None)
