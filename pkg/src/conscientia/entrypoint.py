"""Entry Point service: two-step worker selection, the schedule cache and
rescheduling after worker or rendezvous failure.

All load comparisons are exact: ratios ``a/b`` and ``c/d`` are compared as
``a*d`` against ``c*b``.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable

from .errors import AllSaturated, DuplicateQueryId, MalformedQuery, NoWorkersAlive
from .messages import (
    Query,
    QueryCancel,
    QueryForward,
    QueryRoute,
    Reregister,
    ServicedAck,
)

if TYPE_CHECKING:
    from .monitor import ExchangedTable, Monitor
    from .runtime import Simulation


@dataclass(frozen=True)
class WorkerLoad:
    peer: int
    scheduled: int
    threshold: int
    network_delay: int = 0


@dataclass(frozen=True)
class SubgroupLoad:
    group_id: int
    workers: tuple[WorkerLoad, ...]

    @property
    def scheduled(self) -> int:
        return sum(w.scheduled for w in self.workers)

    @property
    def threshold(self) -> int:
        return sum(w.threshold for w in self.workers)


def _ratio_cmp(a_num: int, a_den: int, b_num: int, b_den: int) -> int:
    lhs, rhs = a_num * b_den, b_num * a_den
    return (lhs > rhs) - (lhs < rhs)


def select_worker_group(view: Iterable[SubgroupLoad]) -> int:
    """Subgroup with the lowest scheduled/threshold ratio; ties go to the lowest id."""
    best = None
    for g in view:
        if not g.workers:
            continue
        if best is None:
            best = g
            continue
        c = _ratio_cmp(g.scheduled, g.threshold, best.scheduled, best.threshold)
        if c < 0 or (c == 0 and g.group_id < best.group_id):
            best = g
    if best is None:
        raise NoWorkersAlive()
    return best.group_id


def select_worker(rows: Iterable[WorkerLoad]) -> int:
    """Least loaded worker with spare capacity.

    Ties on the load ratio are broken by network delay, then PeerId.
    """
    best = None
    for w in rows:
        if w.scheduled >= w.threshold:
            continue
        if best is None:
            best = w
            continue
        c = _ratio_cmp(w.scheduled, w.threshold, best.scheduled, best.threshold)
        if c < 0 or (c == 0 and (w.network_delay, w.peer) < (best.network_delay, best.peer)):
            best = w
    if best is None:
        raise AllSaturated()
    return best.peer


@dataclass
class ScheduleEntry:
    query: Query
    assigned_worker: int
    assigned_at: int
    attempts: int = 1
    state: str = "Scheduled"
    # rebuilt from an exchanged table and not yet confirmed by the worker
    unconfirmed: bool = False


@dataclass
class PendingItem:
    query: Query
    attempts: int = 0
    local_only: bool = False
    reason: str = ""


@dataclass
class ScheduleCache:
    entries: dict[int, ScheduleEntry] = field(default_factory=dict)
    pending: deque[PendingItem] = field(default_factory=deque)
    # queries already recorded as serviced
    done: set[int] = field(default_factory=set)

    def __contains__(self, query_id: int) -> bool:
        return (query_id in self.entries or query_id in self.done
                or any(p.query.query_id == query_id for p in self.pending))

    def load_of(self, worker: int) -> int:
        return sum(1 for e in self.entries.values() if e.assigned_worker == worker)

    def assigned_to(self, worker: int) -> list[ScheduleEntry]:
        return sorted((e for e in self.entries.values() if e.assigned_worker == worker),
                      key=lambda e: e.query.query_id)

    def drop_pending(self, query_id: int) -> None:
        self.pending = deque(p for p in self.pending if p.query.query_id != query_id)

    def forget(self, ids: set[int]) -> None:
        for qid in [q for q in self.entries if q in ids]:
            del self.entries[qid]
        self.pending = deque(p for p in self.pending if p.query.query_id not in ids)


def ids_in_tables(tables: dict[int, "ExchangedTable"], exclude: int | None = None) -> set[int]:
    """Query ids scheduled, waiting or finished in the given subgroup tables."""
    ids: set[int] = set()
    for gid, t in tables.items():
        if gid == exclude:
            continue
        ids.update(q.query_id for q, *_ in t.schedule)
        ids.update(q.query_id for q, _ in t.pending)
        ids.update(t.done)
    return ids


def rebuild_schedule(tables: Iterable["ExchangedTable"], reports: Iterable[Reregister] = (),
                     now: int = 0) -> tuple[ScheduleCache, list[Query]]:
    """Reconstruct a subgroup's schedule after its rendezvous died.

    ``tables`` are the copies of the dead rendezvous' exchanged table held by
    surviving EPM members; the newest slot wins. Each worker report confirms
    its in-progress queries and lists queries it finished while no
    rendezvous was reachable; those are returned separately and excluded
    from the cache, as are table entries the worker no longer holds.
    """
    newest = None
    for t in tables:
        if newest is None or t.slot > newest.slot:
            newest = t
    cache = ScheduleCache()
    if newest is not None:
        for q, worker, attempts in newest.schedule:
            cache.entries[q.query_id] = ScheduleEntry(q, worker, now, attempts, unconfirmed=True)
        for q, attempts in newest.pending:
            cache.pending.append(PendingItem(q, attempts))
        cache.done.update(newest.done)
    recovered = []
    for report in reports:
        recovered.extend(absorb_into(cache, report, now))
    return cache, recovered


def absorb_into(cache: ScheduleCache, report: Reregister, now: int) -> list[Query]:
    """Merge one worker report into ``cache``; returns finished queries not yet recorded."""
    holding = {q.query_id for q in report.in_progress}
    for e in cache.assigned_to(report.worker):
        if e.unconfirmed and e.query.query_id not in holding:
            del cache.entries[e.query.query_id]
    for q in report.in_progress:
        cache.drop_pending(q.query_id)
        entry = cache.entries.get(q.query_id)
        if entry is None:
            cache.entries[q.query_id] = ScheduleEntry(q, report.worker, now)
        else:
            entry.assigned_worker = report.worker
            entry.unconfirmed = False
    recovered = []
    for q in report.serviced:
        cache.drop_pending(q.query_id)
        cache.entries.pop(q.query_id, None)
        if q.query_id not in cache.done:
            cache.done.add(q.query_id)
            recovered.append(q)
    return recovered


class EntryPoint:
    def __init__(self, rv: int, subgroup: int, service_group: int, query_format: str,
                 monitor: "Monitor") -> None:
        self.rv = rv
        self.subgroup = subgroup
        self.service_group = service_group
        self.query_format = query_format
        self.monitor = monitor
        self.cache = ScheduleCache()
        self.seen: set[int] = set()
        self.pending_depth_max = 0

    # -- views -----------------------------------------------------------

    def own_rows(self) -> list[WorkerLoad]:
        rows = []
        for peer, row in sorted(self.monitor.rows.items()):
            rows.append(WorkerLoad(peer, self.cache.load_of(peer), row.threshold, row.network_delay))
        return rows

    def group_view(self) -> list[SubgroupLoad]:
        view = [SubgroupLoad(self.subgroup, tuple(self.own_rows()))]
        for gid, table in sorted(self.monitor.merged.items()):
            if gid == self.subgroup or table.rv == self.rv or not self.monitor.rv_alive(table.rv):
                continue
            view.append(SubgroupLoad(gid, tuple(
                WorkerLoad(r.peer, r.load, r.threshold, r.network_delay) for r in table.rows)))
        return view

    # -- queries ---------------------------------------------------------

    def handle_query(self, sim: "Simulation", q: Query, *, retry: bool = False) -> str:
        known = q.query_id in self.seen or q.query_id in self.cache
        if retry and (known or q.query_id in ids_in_tables(self.monitor.merged, self.subgroup)):
            return "duplicate"
        if known:
            sim.emit("query_rejected", self.rv, query_id=q.query_id, reason="duplicate")
            return "duplicate"
        if not re.fullmatch(self.query_format, q.payload):
            sim.emit("query_rejected", self.rv, query_id=q.query_id, reason="malformed")
            return "malformed"
        self.seen.add(q.query_id)
        return self._dispatch(sim, PendingItem(q))

    def check_query(self, q: Query) -> None:
        """Raise if ``q`` would be rejected by :meth:`handle_query`."""
        if q.query_id in self.seen or q.query_id in self.cache:
            raise DuplicateQueryId(q.query_id)
        if not re.fullmatch(self.query_format, q.payload):
            raise MalformedQuery(q.query_id)

    def handle_route(self, sim: "Simulation", msg: QueryRoute) -> str:
        if msg.query.query_id in self.seen or msg.query.query_id in self.cache:
            return "duplicate"
        self.seen.add(msg.query.query_id)
        return self._dispatch(sim, PendingItem(msg.query, msg.attempts, local_only=True))

    def _dispatch(self, sim: "Simulation", item: PendingItem, *, requeue_front: bool = False) -> str:
        q = item.query
        target = self.subgroup
        if not item.local_only:
            try:
                target = select_worker_group(self.group_view())
            except NoWorkersAlive:
                target = self.subgroup
        if target != self.subgroup:
            rv = self.monitor.merged[target].rv
            sim.send(self.rv, rv, QueryRoute(q, self.rv, item.attempts))
            return "routed"
        rows = self.own_rows()
        try:
            worker = select_worker(rows)
        except AllSaturated:
            if requeue_front:
                self.cache.pending.appendleft(item)
            else:
                self.cache.pending.append(item)
            self.pending_depth_max = max(self.pending_depth_max, len(self.cache.pending))
            return "enqueued"
        row = next(r for r in rows if r.peer == worker)
        attempts = item.attempts + 1
        self.cache.entries[q.query_id] = ScheduleEntry(q, worker, sim.now, attempts)
        d = dict(query_id=q.query_id, worker=worker, subgroup=self.subgroup,
                 view_load=row.scheduled, view_threshold=row.threshold)
        if attempts == 1:
            sim.emit("query_scheduled", self.rv, **d)
        else:
            sim.emit("query_rescheduled", self.rv, reason=item.reason or "failure", **d)
        self.monitor.note_scheduled(worker)
        sim.send(self.rv, worker, QueryForward(q, self.rv))
        return "scheduled"

    def retry_pending(self, sim: "Simulation") -> None:
        while self.cache.pending:
            item = self.cache.pending.popleft()
            if self._dispatch(sim, item, requeue_front=True) == "enqueued":
                break

    def handle_query_serviced(self, sim: "Simulation", query_id: int, worker: int) -> None:
        sim.send(self.rv, worker, ServicedAck(query_id))
        entry = self.cache.entries.pop(query_id, None)
        if entry is None:
            sim.emit("late_serviced_ignored", self.rv, query_id=query_id, worker=worker)
            return
        self.cache.done.add(query_id)
        sim.emit("query_serviced", self.rv, query_id=query_id, worker=worker)
        if entry.assigned_worker != worker:
            sim.send(self.rv, entry.assigned_worker, QueryCancel(query_id))
            sim.emit("query_cancelled", self.rv, query_id=query_id, worker=entry.assigned_worker)
        self.retry_pending(sim)

    def handle_worker_failure(self, sim: "Simulation", worker: int) -> int:
        moved = self.cache.assigned_to(worker)
        for e in moved:
            del self.cache.entries[e.query.query_id]
        for e in moved:
            self._dispatch(sim, PendingItem(e.query, e.attempts, reason="failure"))
        return len(moved)

    def handle_busy(self, sim: "Simulation", query_id: int, worker: int) -> None:
        entry = self.cache.entries.get(query_id)
        if entry is None or entry.assigned_worker != worker:
            return
        del self.cache.entries[query_id]
        # the worker is full whatever its last heartbeat said
        self.monitor.cap_threshold(worker, self.cache.load_of(worker))
        # retried on the next heartbeat or completion, never synchronously:
        # a co-located worker would bounce it back at the same instant
        self.cache.pending.appendleft(PendingItem(entry.query, entry.attempts, reason="busy"))
        self.pending_depth_max = max(self.pending_depth_max, len(self.cache.pending))

    def adopt(self, sim: "Simulation", cache: ScheduleCache) -> None:
        """Install a rebuilt cache; entries of workers no longer present are rescheduled.

        Rebuilt pending items are left queued until the next heartbeat, so
        worker reports sent on reconnection are absorbed first.
        """
        self.cache = cache
        for e in list(cache.entries.values()):
            if e.assigned_worker not in self.monitor.rows:
                del cache.entries[e.query.query_id]
                self._dispatch(sim, PendingItem(e.query, e.attempts, reason="rebuild"))

    def absorb_report(self, sim: "Simulation", report: Reregister) -> None:
        for q in report.serviced:
            sim.send(self.rv, report.worker, ServicedAck(q.query_id))
        for q in absorb_into(self.cache, report, sim.now):
            sim.emit("query_serviced", self.rv, query_id=q.query_id, worker=report.worker,
                     recovered=1)
        self.retry_pending(sim)

    def snapshot(self) -> tuple[tuple, tuple, tuple]:
        schedule = tuple((e.query, e.assigned_worker, e.attempts)
                         for _, e in sorted(self.cache.entries.items()))
        pending = tuple((p.query, p.attempts) for p in self.cache.pending)
        return schedule, pending, tuple(sorted(self.cache.done))
