"""Monitoring service: heartbeat table, failure detection, EPM table exchange
and replacement spawning."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

from .errors import NoEligibleHost
from .messages import Heartbeat, TableExchange


@dataclass(frozen=True)
class MonitorRow:
    peer: int
    load: int = 0
    queries_scheduled: int = 0
    network_delay: int = 0
    last_heartbeat: int = 0
    threshold: int = 1


@dataclass(frozen=True)
class ExchangedTable:
    """One rendezvous' table as last received (or sent) in an exchange round."""

    rv: int
    subgroup: int
    slot: int
    rows: tuple[MonitorRow, ...]
    schedule: tuple = ()
    pending: tuple = ()
    done: tuple = ()


@dataclass
class MonitorTable:
    subgroup: int
    rows: dict[int, MonitorRow] = field(default_factory=dict)
    slot: int = 0


class Monitor:
    def __init__(self, rv: int, subgroup: int, *, heartbeat_period: int = 500, k: int = 3) -> None:
        self.rv = rv
        self.table = MonitorTable(subgroup)
        self.heartbeat_period = heartbeat_period
        self.k = k
        # other EPM rendezvous -> time of their last RV heartbeat
        self.rv_seen: dict[int, int] = {}
        # subgroup -> newest table seen for it (own snapshot included)
        self.merged: dict[int, ExchangedTable] = {}
        # tables of rendezvous declared failed, kept for schedule rebuilds
        self.orphaned: dict[int, ExchangedTable] = {}
        self.saturated_slots = 0
        self.sparse_slots = 0

    @property
    def subgroup(self) -> int:
        return self.table.subgroup

    @property
    def rows(self) -> dict[int, MonitorRow]:
        return self.table.rows

    def add_worker(self, peer: int, now: int, threshold: int = 1) -> None:
        if peer not in self.rows:
            self.rows[peer] = MonitorRow(peer, last_heartbeat=now, threshold=threshold)

    def record_heartbeat(self, hb: Heartbeat, now: int, scheduled: int) -> MonitorRow | None:
        """Update the sender's row; returns None when the sender is not registered."""
        row = self.rows.get(hb.sender)
        if row is None:
            return None
        row = replace(row, last_heartbeat=now, threshold=hb.threshold,
                      network_delay=now - hb.sent_at, load=scheduled)
        self.rows[hb.sender] = row
        return row

    def note_scheduled(self, worker: int) -> None:
        row = self.rows.get(worker)
        if row is not None:
            self.rows[worker] = replace(row, load=row.load + 1,
                                        queries_scheduled=row.queries_scheduled + 1)

    def cap_threshold(self, worker: int, cap: int) -> None:
        row = self.rows.get(worker)
        if row is not None:
            self.rows[worker] = replace(row, threshold=max(1, min(row.threshold, cap)))

    def _silent(self, last: int, now: int) -> bool:
        return now - last > self.k * self.heartbeat_period

    def detect_failures(self, now: int) -> list[int]:
        """Workers silent for more than k heartbeat periods; removed from the table."""
        failed = [p for p, row in sorted(self.rows.items())
                  if p != self.rv and self._silent(row.last_heartbeat, now)]
        for p in failed:
            del self.rows[p]
        return failed

    def detect_rv_failures(self, now: int) -> list[int]:
        failed = [rv for rv, last in sorted(self.rv_seen.items()) if self._silent(last, now)]
        for rv in failed:
            del self.rv_seen[rv]
            for gid, t in list(self.merged.items()):
                if t.rv == rv:
                    self.orphaned[gid] = self.merged.pop(gid)
        return failed

    def record_rv_heartbeat(self, rv: int, now: int) -> None:
        if rv != self.rv:
            self.rv_seen[rv] = now

    def rv_alive(self, rv: int) -> bool:
        return rv == self.rv or rv in self.rv_seen

    def snapshot(self, loads: dict[int, int], schedule: tuple, pending: tuple,
                 done: tuple = ()) -> TableExchange:
        """Advance the slot and produce this round's outgoing table."""
        self.table.slot += 1
        rows = tuple(replace(r, load=loads.get(p, 0)) for p, r in sorted(self.rows.items()))
        own = ExchangedTable(self.rv, self.subgroup, self.table.slot, rows, schedule, pending, done)
        self.merged[self.subgroup] = own
        return TableExchange(self.rv, self.subgroup, self.table.slot, rows, schedule, pending, done)

    def merge(self, msg: TableExchange) -> bool:
        """Fold a received table in; returns False if it was stale and discarded."""
        cur = self.merged.get(msg.subgroup)
        if cur is not None and cur.slot >= msg.slot:
            return False
        self.merged[msg.subgroup] = ExchangedTable(msg.sender, msg.subgroup, msg.slot,
                                                   msg.rows, msg.schedule, msg.pending, msg.done)
        self.orphaned.pop(msg.subgroup, None)
        return True

    def service_saturated(self) -> bool:
        rows = [r for t in self.merged.values() for r in t.rows]
        return bool(rows) and all(r.load >= r.threshold for r in rows)


def exchange_tables(tables: Iterable[ExchangedTable]) -> dict[int, ExchangedTable]:
    """Merge a set of tables keyed by subgroup, newest slot winning."""
    merged: dict[int, ExchangedTable] = {}
    for t in tables:
        cur = merged.get(t.subgroup)
        if cur is None or t.slot > cur.slot:
            merged[t.subgroup] = t
    return merged


def spawn_replacement(kind: str, pool: Iterable[int]) -> int:
    """Pick the host for a new ``kind`` instance: the lowest eligible PeerId."""
    hosts = sorted(pool)
    if not hosts:
        raise NoEligibleHost(kind)
    return hosts[0]
