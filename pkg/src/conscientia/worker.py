"""Worker service: adaptive admission threshold, query processing, heartbeats
and survival of rendezvous loss."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .messages import (
    Busy,
    Heartbeat,
    Query,
    QueryForward,
    QueryReply,
    QueryServiced,
    Reregister,
)

if TYPE_CHECKING:
    from .runtime import Simulation


def threshold_raw(t_old: int, qx: int) -> int:
    """Unclamped threshold update. ``qx > t_old`` is handled as ``qx == t_old``."""
    if qx >= t_old:
        return abs(t_old - 2 * t_old) - t_old // 10
    return abs(t_old - 2 * qx) - (t_old - qx)


def update_threshold(t_old: int, qx: int, t_min: int = 1) -> int:
    if qx < 0:
        raise ValueError("qx must be non-negative")
    return max(threshold_raw(t_old, qx), t_min)


@dataclass
class ThresholdState:
    T: int
    T_min: int = 1
    X: int = 2
    Q_count: int = 0
    window_start: int = 0

    def __post_init__(self) -> None:
        if self.T < self.T_min:
            raise ValueError("T must be >= T_min")

    def close_window(self, now: int) -> tuple[int, int, int, int]:
        """Apply the update for the window ending at ``now``.

        Returns ``(t_old, qx, raw, clamped)``.
        """
        t_old, qx = self.T, self.Q_count
        raw = threshold_raw(t_old, qx)
        self.T = max(raw, self.T_min)
        self.Q_count = 0
        self.window_start = now
        return t_old, qx, raw, self.T


@dataclass
class ServiceTime:
    lo: int
    hi: int

    def draw(self, rng) -> int:
        if self.lo == self.hi:
            return self.lo
        return rng.randint(self.lo, self.hi)


@dataclass
class WorkerService:
    peer: int
    service_group: int
    rv: int
    threshold: ThresholdState
    service_time: ServiceTime
    query_format: str = ".*"
    # query_id -> (query, entry_rv)
    in_flight: dict[int, tuple[Query, int]] = field(default_factory=dict)
    # completed but serviced message not acknowledged: query_id -> (query, dest)
    unacked: dict[int, tuple[Query, int]] = field(default_factory=dict)
    # held while no RV is reachable, in generation order
    outbox: list = field(default_factory=list)
    cancelled: set[int] = field(default_factory=set)
    # unacked ids seen at the previous tick; resent if still unacked at the next
    stale: set[int] = field(default_factory=set)
    unacked_heartbeats: int = 0
    rv_lost: bool = False
    max_in_flight_over: int = 0

    def start(self, sim: "Simulation") -> None:
        self.threshold.window_start = sim.now
        sim.timer(sim.params.heartbeat_period, self.peer, "worker_tick", self.service_group)

    # -- query handling -------------------------------------------------

    def handle_query(self, sim: "Simulation", msg: QueryForward) -> str:
        q = msg.query
        if q.query_id in self.cancelled:
            sim.emit("cancelled", self.peer, query_id=q.query_id, stage="before_start")
            return "cancelled"
        if not re.fullmatch(self.query_format, q.payload):
            sim.emit("query_rejected", self.peer, query_id=q.query_id, reason="malformed")
            return "malformed"
        if len(self.in_flight) >= self.threshold.T:
            sim.send(self.peer, msg.entry_rv, Busy(q.query_id, self.peer))
            return "busy"
        self.in_flight[q.query_id] = (q, msg.entry_rv)
        self.max_in_flight_over = max(self.max_in_flight_over, len(self.in_flight) - self.threshold.T)
        sim.timer(self.service_time.draw(sim.rng), self.peer, "complete", q.query_id)
        return "accepted"

    def complete_query(self, sim: "Simulation", query_id: int) -> None:
        entry = self.in_flight.pop(query_id, None)
        if entry is None:
            return
        q, dest = entry
        if query_id in self.cancelled:
            sim.emit("cancelled", self.peer, query_id=query_id, stage="in_flight")
            return
        self.threshold.Q_count += 1
        sim.send(self.peer, q.client_pipe.owner, QueryReply(query_id, f"result:{q.payload}", self.peer))
        if self.rv_lost:
            self.outbox.append(("serviced", q))
        else:
            self.unacked[query_id] = (q, dest)
            sim.send(self.peer, dest, QueryServiced(query_id, self.peer))

    def handle_cancel(self, sim: "Simulation", query_id: int) -> None:
        self.cancelled.add(query_id)

    def handle_serviced_ack(self, query_id: int) -> None:
        self.unacked.pop(query_id, None)

    # -- heartbeats ------------------------------------------------------

    def heartbeat_tick(self, sim: "Simulation") -> None:
        p = sim.params
        if not self.rv_lost and self.unacked_heartbeats >= p.k:
            self.handle_rv_loss(sim)
        if sim.now - self.threshold.window_start >= self.threshold.X * 1000:
            t_old, qx, raw, clamped = self.threshold.close_window(sim.now)
            sim.emit("threshold_update", self.peer, t_old=t_old, qx=qx, raw=raw, clamped=clamped)
        hb = Heartbeat(self.peer, sim.now, self.threshold.T)
        if self.rv_lost:
            self.outbox.append(("heartbeat", hb))
        else:
            self.unacked_heartbeats += 1
            sim.send(self.peer, self.rv, hb)
            for qid in sorted(self.stale & self.unacked.keys()):
                sim.send(self.peer, self.unacked[qid][1], QueryServiced(qid, self.peer))
        self.stale = set(self.unacked)
        sim.timer(p.heartbeat_period, self.peer, "worker_tick", self.service_group)

    def handle_heartbeat_ack(self) -> None:
        self.unacked_heartbeats = 0

    # -- rendezvous loss -------------------------------------------------

    def handle_rv_loss(self, sim: "Simulation") -> None:
        self.rv_lost = True
        sim.emit("failure_detected", self.peer, peer=self.rv, kind="rv", detector="worker")
        sim.timer(sim.params.rv_wait_timeout, self.peer, "rv_wait", self.rv)

    def reconnect(self, sim: "Simulation", new_rv: int, old_rv: int) -> tuple[int, int]:
        """Attach to ``new_rv`` and flush held state. Returns (reported, flushed)."""
        self.rv = new_rv
        self.rv_lost = False
        self.unacked_heartbeats = 0
        for qid, (q, dest) in list(self.in_flight.items()):
            if dest == old_rv:
                self.in_flight[qid] = (q, new_rv)
        serviced = []
        for qid, (q, dest) in list(self.unacked.items()):
            if dest == old_rv:
                serviced.append(q)
                self.unacked[qid] = (q, new_rv)
        held_hbs = []
        for kind, item in self.outbox:
            if kind == "serviced":
                serviced.append(item)
                self.unacked[item.query_id] = (item, new_rv)
            else:
                held_hbs.append(item)
        self.outbox.clear()
        in_progress = tuple(q for q, dest in self.in_flight.values() if dest == new_rv)
        sim.send(self.peer, new_rv, Reregister(self.peer, in_progress, tuple(serviced)))
        for hb in held_hbs:
            sim.send(self.peer, new_rv, hb)
        return len(in_progress), len(serviced) + len(held_hbs)
