"""Simulation runtime: binds overlay state, services and clients to the kernel
and drives a scenario's timeline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

from .entrypoint import EntryPoint, PendingItem, ids_in_tables, rebuild_schedule
from .errors import NoCandidates, NoEligibleHost, RvDead
from .kernel import Delivery, Event, Kernel, NetworkModel
from .messages import (
    Busy,
    Heartbeat,
    HeartbeatAck,
    PipeRef,
    Query,
    QueryCancel,
    QueryForward,
    QueryReply,
    QueryRoute,
    QueryServiced,
    QuerySubmit,
    Reregister,
    RvAnnounce,
    RvHeartbeat,
    ServicedAck,
    SpawnOrder,
    TableExchange,
)
from .monitor import Monitor, spawn_replacement
from .overlay import GroupKind, Overlay
from .scenario import Scenario, ServiceSpec, TimelineEvent
from .trace import KERNEL, TraceRecord, Tracer
from .worker import ServiceTime, ThresholdState, WorkerService

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Timer:
    name: str
    arg: Any = None
    epoch: int = 0


@dataclass
class ClientState:
    peer: int
    pipe: PipeRef
    # service name -> (service group id, entry point rv)
    joined: dict[str, tuple[int, int]] = field(default_factory=dict)
    replied: set[int] = field(default_factory=set)
    sent: dict[int, int] = field(default_factory=dict)
    # unanswered queries -> entry point they were sent to
    outstanding: dict[int, tuple[Query, int]] = field(default_factory=dict)


class Simulation:
    def __init__(self, scenario: Scenario, *, seed: int | None = None,
                 check_invariants: bool = False) -> None:
        self.scenario = scenario
        self.params = scenario.params
        self.tracer = Tracer()
        network = NetworkModel(latencies={n.name: dict(n.latency) for n in scenario.networks},
                               loss_prob=self.params.loss_prob, jitter_max=self.params.jitter_max)
        self.kernel = Kernel(scenario.seed if seed is None else seed, network, self.tracer)
        self.kernel.handler = self._dispatch
        self.kernel.link_class = self._link_class
        self.overlay = Overlay(r_max=self.params.r_max, tracer=self.tracer,
                               clock=lambda: self.kernel.now, connected=network.connected)
        self.check_invariants = check_invariants
        self.workers: dict[int, WorkerService] = {}
        self.monitors: dict[int, Monitor] = {}
        self.entrypoints: dict[int, EntryPoint] = {}
        self.clients: dict[int, ClientState] = {}
        self.epochs: dict[int, int] = {}
        self.service_specs: dict[int, ServiceSpec] = {}
        self.boosts: dict[str, tuple[int, int]] = {}
        self.dropped_dead = 0
        self.pending_depth_max = 0
        self._next_query_id = 1
        self._next_pipe = 1
        self._hosting = {w: sv for sv in scenario.services for w in sv.workers}
        self._started = False
        for p in scenario.peers:
            self.kernel.add_peer(p.id, p.network)
            self.overlay.add_peer(p.id, p.network)
            self.epochs[p.id] = 0

    # -- plumbing used by services --------------------------------------

    @property
    def now(self) -> int:
        return self.kernel.now

    @property
    def rng(self):
        return self.kernel.rng

    def alive(self, peer: int) -> bool:
        return peer not in self.kernel.down

    def emit(self, ev: str, actor, **d) -> TraceRecord:
        return self.tracer.emit(self.now, ev, actor, **d)

    def send(self, src: int, dst: int, msg) -> bool:
        if not self.alive(src):
            return False
        return self.kernel.send_message(src, dst, msg)

    def timer(self, delay: int, peer: int, name: str, arg: Any = None) -> None:
        self.kernel.after(delay, peer, Timer(name, arg, self.epochs[peer]))

    def _link_class(self, a: int, b: int) -> str:
        sa = self.overlay.subgroup_of_worker(a) or self.overlay.subgroup_of_rv(a)
        sb = self.overlay.subgroup_of_worker(b) or self.overlay.subgroup_of_rv(b)
        if sa is not None and sb is not None and sa.group_id == sb.group_id:
            return "intra_subgroup"
        return "inter_subgroup"

    # -- running ---------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for ev in self.scenario.timeline:
            self.kernel.schedule_event(ev.at, KERNEL, ev)
        for p in self.scenario.peers:
            self.timer(self.params.discovery_timeout, p.id, "bootstrap")

    def run(self, until: int | None = None) -> list[TraceRecord]:
        self.start()
        t_end = self.params.duration if until is None else until
        self.kernel.run_until(t_end)
        depth = max([self.pending_depth_max] + [ep.pending_depth_max for ep in self.entrypoints.values()])
        self.tracer.emit(max(t_end, self.now), "run_end", KERNEL,
                         messages_sent=self.kernel.messages_sent, pending_depth_max=depth,
                         dropped_dead=self.dropped_dead)
        return self.tracer.records

    def _dispatch(self, ev: Event) -> None:
        if ev.target == KERNEL:
            payload = ev.payload
            if isinstance(payload, TimelineEvent):
                self.apply_timeline_event(payload)
            elif isinstance(payload, tuple) and payload[0] == "election":
                self._run_election(payload[1], payload[2])
        else:
            peer = ev.target
            if not self.alive(peer):
                if isinstance(ev.payload, Delivery):
                    self.dropped_dead += 1
                return
            if isinstance(ev.payload, Timer):
                if ev.payload.epoch == self.epochs[peer]:
                    self._on_timer(peer, ev.payload)
            else:
                self._on_message(peer, ev.payload.src, ev.payload.msg)
        if self.check_invariants:
            self.assert_invariants()

    def assert_invariants(self) -> None:
        self.overlay.check_well_formed()
        for w in self.workers.values():
            assert w.max_in_flight_over <= 0, f"worker {w.peer} admitted beyond its threshold"
            assert w.threshold.T >= w.threshold.T_min
            if not w.rv_lost:
                assert not w.outbox, f"worker {w.peer} holds messages while connected"

    # -- timeline --------------------------------------------------------

    def apply_timeline_event(self, e: TimelineEvent) -> None:
        if e.action == "kill_peer":
            self._kill(e.peer)
        elif e.action == "revive_peer":
            self._revive(e.peer)
        elif e.action == "partition":
            self.kernel.set_partition(e.sets)
            views = self.overlay.recompute_visibility("split", self._observers())
            sets = "|".join(",".join(str(x) for x in sorted(s)) for s in e.sets)
            self.emit("partition", KERNEL, sets=sets, **{f"visible_{p}": v for p, v in views.items()})
        elif e.action == "heal":
            self.kernel.set_partition([])
            views = self.overlay.recompute_visibility("heal", self._observers())
            self.emit("heal", KERNEL, **{f"visible_{p}": v for p, v in views.items()})
        elif e.action == "inject_load":
            self.boosts[e.service] = (self.now + e.duration, e.multiplier)

    def _observers(self) -> list[int]:
        return [p.id for p in self.scenario.peers if p.role == "client"]

    def _kill(self, peer: int) -> None:
        if not self.alive(peer):
            return
        self.kernel.down.add(peer)
        self.epochs[peer] += 1
        self.overlay.kill(peer)

    def _revive(self, peer: int) -> None:
        if self.alive(peer):
            return
        self.kernel.down.discard(peer)
        self.epochs[peer] += 1
        for table in (self.workers, self.monitors, self.entrypoints, self.clients):
            table.pop(peer, None)
        for sub in self.overlay.forget(peer):
            self.kernel.after(self.params.election_delay, KERNEL, ("election", sub, peer))
        self.timer(self.params.discovery_timeout, peer, "bootstrap")

    # -- bootstrap, workers and rendezvous services ---------------------

    def _bootstrap(self, peer: int) -> None:
        self.overlay.bootstrap_peer(peer)
        spec = self.scenario.peer(peer)
        if spec.role == "client":
            self._start_client(peer)
        elif peer in self._hosting and not spec.spare:
            self._start_worker(peer, self._hosting[peer])

    def _start_worker(self, peer: int, sv: ServiceSpec) -> None:
        pure_rv = self.scenario.peer(peer).role == "rendezvous" and peer not in self.workers
        svc = self.overlay.ensure_group_path(peer, sv.category, sv.name, sv.query_format,
                                             host_worker=not pure_rv)
        self.service_specs[svc] = sv
        host = "WorkerService" in self.overlay.peers[peer].services
        if host and peer not in self.workers:
            sub = self.overlay.subgroup_of_worker(peer) or self.overlay.subgroup_of_rv(peer)
            rv = self.overlay.tables[sub.group_id].rv
            w = WorkerService(peer, svc, rv, ThresholdState(sv.t_initial, sv.t_min, sv.x),
                              ServiceTime(*sv.service_time), sv.query_format)
            self.workers[peer] = w
            w.start(self)
        self._refresh_service(svc)

    def _refresh_service(self, svc: int) -> None:
        """Bring rendezvous services and monitor rows in line with the overlay."""
        sv = self.service_specs[svc]
        for sub in self.overlay.service_subgroups(svc):
            table = self.overlay.tables[sub.group_id]
            rv = table.rv
            if not self.overlay.alive(rv):
                continue
            self._launch_rv(rv, sub.group_id, svc)
            mon = self.monitors[rv]
            members = list(table.registered)
            if rv in self.workers:
                members.append(rv)
                self.workers[rv].rv = rv
            for w in members:
                t = self.workers[w].threshold.T if w in self.workers else sv.t_initial
                mon.add_worker(w, self.now, t)
            for w in list(mon.rows):
                if w not in members:
                    del mon.rows[w]

    def _launch_rv(self, rv: int, sub: int, svc: int) -> bool:
        mon = self.monitors.get(rv)
        if mon is not None and mon.subgroup == sub:
            return False
        mon = Monitor(rv, sub, heartbeat_period=self.params.heartbeat_period, k=self.params.k)
        self.monitors[rv] = mon
        self.entrypoints[rv] = EntryPoint(rv, sub, svc, self.service_specs[svc].query_format, mon)
        for other in self.overlay.epm_of(svc).rv_peers:
            if other != rv:
                mon.record_rv_heartbeat(other, self.now)
        self.timer(self.params.heartbeat_period, rv, "monitor_tick", sub)
        e = self.params.exchange_interval
        self.timer(e - self.now % e, rv, "exchange", sub)
        return True

    def _epm_peers(self, rv: int) -> list[int]:
        ep = self.entrypoints[rv]
        return [p for p in self.overlay.epm_of(ep.service_group).rv_peers if p != rv]

    # -- clients ---------------------------------------------------------

    def _start_client(self, peer: int) -> None:
        st = ClientState(peer, PipeRef(peer, self._next_pipe))
        self._next_pipe += 1
        self.clients[peer] = st
        for i, wl in enumerate(self.scenario.workload):
            if wl.client != peer or wl.count == 0:
                continue
            first = wl.schedule[0] if wl.schedule is not None else wl.start
            self.kernel.schedule_event(max(first, self.now), peer,
                                       Timer("arrival", (i, 0), self.epochs[peer]))

    def _walk(self, st: ClientState, name: str) -> tuple[int, int] | None:
        """Join Root -> categories -> service; returns (service gid, entry point)."""
        cached = st.joined.get(name)
        if cached is not None:
            if any(g.group_id == cached[0] for g in self.overlay.visible_services(st.peer)):
                return cached
            del st.joined[name]
        ov = self.overlay
        scope = ov.root_of(st.peer)
        if scope is None:
            return None
        sv = self.scenario.service(name)
        for cat in sv.category:
            ads = [a for a in ov.discover_advertisements(st.peer, scope)
                   if a.kind is GroupKind.CATEGORY and a.name == cat]
            if not ads:
                return None
            ov.join_group(st.peer, ads[0].group_id)
            scope = ads[0].group_id
        ads = [a for a in ov.discover_advertisements(st.peer, scope)
               if a.kind is GroupKind.SERVICE and a.name == name]
        if not ads:
            return None
        rv = ov.join_group(st.peer, ads[0].group_id)
        st.joined[name] = (ads[0].group_id, rv)
        return st.joined[name]

    def _arrival(self, peer: int, idx: int, n: int) -> None:
        st = self.clients[peer]
        wl = self.scenario.workload[idx]
        target = self._walk(st, wl.service)
        qid = self._next_query_id
        self._next_query_id += 1
        if target is None:
            self.emit("query_rejected", peer, query_id=qid, reason="not_discoverable",
                      service=wl.service)
        else:
            gid, ep = target
            q = Query(qid, st.pipe, gid, wl.payload, self.now)
            st.sent[qid] = self.now
            st.outstanding[qid] = (q, ep)
            self.emit("query_submitted", peer, query_id=qid, service=gid, entry_point=ep)
            self.send(peer, ep, QuerySubmit(q))
        n += 1
        if n >= wl.count:
            return
        if wl.schedule is not None:
            if n >= len(wl.schedule):
                return
            at = max(wl.schedule[n], self.now)
        else:
            gap = wl.interval
            boost = self.boosts.get(wl.service)
            if boost is not None and self.now < boost[0]:
                gap = max(1, gap // boost[1])
            at = self.now + gap
        self.kernel.schedule_event(at, peer, Timer("arrival", (idx, n), self.epochs[peer]))

    # -- timers ----------------------------------------------------------

    def _on_timer(self, peer: int, t: Timer) -> None:
        name = t.name
        if name == "bootstrap":
            self._bootstrap(peer)
        elif name == "arrival":
            self._arrival(peer, *t.arg)
        elif name == "worker_tick":
            w = self.workers.get(peer)
            if w is not None:
                w.heartbeat_tick(self)
        elif name == "complete":
            w = self.workers.get(peer)
            if w is not None:
                w.complete_query(self, t.arg)
        elif name == "rv_wait":
            self._rv_wait_expired(peer, t.arg)
        elif name == "monitor_tick":
            if self._rv_active(peer, t.arg):
                self._monitor_tick(peer)
        elif name == "exchange":
            if self._rv_active(peer, t.arg):
                self._exchange(peer)

    def _rv_active(self, peer: int, sub: int) -> bool:
        mon = self.monitors.get(peer)
        return mon is not None and mon.subgroup == sub

    def _monitor_tick(self, rv: int) -> None:
        mon = self.monitors[rv]
        ep = self.entrypoints[rv]
        for w in mon.detect_failures(self.now):
            self.emit("failure_detected", rv, peer=w, kind="worker", detector="monitor")
            self.overlay.deregister(w)
            ep.handle_worker_failure(self, w)
        for dead in mon.detect_rv_failures(self.now):
            self.emit("failure_detected", rv, peer=dead, kind="rv", detector="epm")
            sub = self.overlay.subgroup_of_rv(dead)
            if sub is not None:
                self.kernel.after(self.params.election_delay, KERNEL, ("election", sub.group_id, dead))
        for other in self._epm_peers(rv):
            self.send(rv, other, RvHeartbeat(rv, self.now))
        self.timer(self.params.heartbeat_period, rv, "monitor_tick", mon.subgroup)

    def _exchange(self, rv: int) -> None:
        mon = self.monitors[rv]
        ep = self.entrypoints[rv]
        ep.retry_pending(self)
        schedule, pending, done = ep.snapshot()
        loads = {w: ep.cache.load_of(w) for w in mon.rows}
        msg = mon.snapshot(loads, schedule, pending, done)
        self.emit("table_exchange", rv, subgroup=mon.subgroup, slot=msg.slot, rows=len(msg.rows),
                  entries=len(schedule), pending=len(pending))
        for other in self._epm_peers(rv):
            self.send(rv, other, msg)
        self._check_saturation(rv)
        if self.params.consolidation:
            self._maybe_consolidate(rv)
        if rv in self.entrypoints:
            self.entrypoints[rv].retry_pending(self)
            self.timer(self.params.exchange_interval, rv, "exchange", mon.subgroup)

    def _check_saturation(self, rv: int) -> None:
        mon = self.monitors[rv]
        if mon.service_saturated():
            mon.saturated_slots += 1
        else:
            mon.saturated_slots = 0
        if mon.saturated_slots < self.params.saturation_slots:
            return
        # one EPM member acts: the lowest PeerId it knows to be alive
        if min([rv] + list(mon.rv_seen)) != rv:
            return
        mon.saturated_slots = 0
        svc = self.entrypoints[rv].service_group
        pool = [p.id for p in self.scenario.peers
                if p.spare and self.overlay.alive(p.id) and self.overlay.connected(rv, p.id)
                and p.id not in self.workers and self.overlay.root_of(p.id) is not None]
        try:
            host = spawn_replacement("WorkerService", pool)
        except NoEligibleHost:
            self.emit("spawn", rv, kind="WorkerService", host=-1, result="no_eligible_host")
            return
        self.emit("spawn", rv, kind="WorkerService", host=host, result="ok")
        self.send(rv, host, SpawnOrder("WorkerService", host, self.service_specs[svc].name))

    def _maybe_consolidate(self, rv: int) -> None:
        mon = self.monitors[rv]
        ep = self.entrypoints[rv]
        sub = mon.subgroup
        table = self.overlay.tables.get(sub)
        if table is None:
            return
        size = len(table.registered) + (1 if rv in self.workers else 0)
        mon.sparse_slots = mon.sparse_slots + 1 if size < self.params.r_min else 0
        if mon.sparse_slots < 3 or ep.cache.entries or ep.cache.pending:
            return
        moving = size + (0 if rv in self.workers else 1)
        for sib in self.overlay.service_subgroups(ep.service_group):
            other = self.overlay.tables[sib.group_id]
            if sib.group_id == sub or not self.overlay.alive(other.rv) \
                    or not self.overlay.connected(rv, other.rv):
                continue
            if len(other.registered) + moving > other.r_max:
                continue
            moved = self.overlay.retire_rendezvous(sub, sib.group_id)
            del self.monitors[rv]
            del self.entrypoints[rv]
            for m in self.monitors.values():
                m.rv_seen.pop(rv, None)
                m.merged.pop(sub, None)
            sv = self.service_specs[ep.service_group]
            if rv not in self.workers:
                w = WorkerService(rv, ep.service_group, other.rv, ThresholdState(sv.t_initial, sv.t_min, sv.x),
                                  ServiceTime(*sv.service_time), sv.query_format)
                self.workers[rv] = w
                w.start(self)
            self._refresh_service(ep.service_group)
            for w in moved:
                self.send(other.rv, w, RvAnnounce(other.rv, sib.group_id, rv))
            return

    # -- elections -------------------------------------------------------

    def _run_election(self, sub: int, dead: int) -> None:
        ov = self.overlay
        table = ov.tables.get(sub)
        if table is None or table.rv != dead or ov.alive(dead):
            return
        svc = ov.groups[sub].parent
        survivors = [p for p in ov.epm_of(svc).rv_peers if p != dead and ov.alive(p) and p in self.monitors]
        sources = []
        for p in survivors:
            m = self.monitors[p]
            t = m.orphaned.get(sub) or m.merged.get(sub)
            if t is not None and t.rv == dead:
                sources.append(t)
        candidates = sorted(p for p in table.registered if ov.alive(p))
        try:
            winner = ov.elect_rendezvous(sub)
        except NoCandidates:
            self.emit("election", KERNEL, subgroup=sub, failed_rv=dead, winner=-1,
                      result="no_candidates", candidates="")
            for m in self.monitors.values():
                m.merged.pop(sub, None)
                m.orphaned.pop(sub, None)
            if survivors:
                heir = self.entrypoints[min(survivors)]
                cache, _ = rebuild_schedule(sources, (), self.now)
                for e in sorted(cache.entries.values(), key=lambda e: e.query.query_id):
                    heir._dispatch(self, PendingItem(e.query, e.attempts, reason="rebuild"))
                for item in cache.pending:
                    heir._dispatch(self, item)
            return
        cache, _ = rebuild_schedule(sources, (), self.now)
        if survivors:
            known = ids_in_tables(self.monitors[min(survivors)].merged, exclude=sub)
            cache.forget(known)
        self.emit("election", winner, subgroup=sub, failed_rv=dead, winner=winner, result="elected",
                  candidates=candidates, rebuilt=len(cache.entries), sources=len(sources))
        self.monitors.pop(winner, None)
        self.entrypoints.pop(winner, None)
        self._launch_rv(winner, sub, svc)
        self.emit("spawn", winner, kind="EntryPoint", host=winner, result="ok")
        self.emit("spawn", winner, kind="Monitoring", host=winner, result="ok")
        mon = self.monitors[winner]
        if survivors:
            peer_mon = self.monitors[min(survivors)]
            for gid, t in peer_mon.merged.items():
                if gid != sub:
                    mon.merged[gid] = t
        mon.table.slot = max([t.slot for t in sources] + [0])
        self._refresh_service(svc)
        if winner in self.workers:
            self.workers[winner].reconnect(self, winner, dead)
        self.entrypoints[winner].adopt(self, cache)
        for w in sorted(ov.tables[sub].registered):
            self.send(winner, w, RvAnnounce(winner, sub, dead))
        for c, st in sorted(self.clients.items()):
            for name, (gid, ep) in list(st.joined.items()):
                if gid == svc and ep == dead:
                    self.send(winner, c, RvAnnounce(winner, sub, dead))

    def _rv_wait_expired(self, peer: int, old_rv: int) -> None:
        w = self.workers.get(peer)
        if w is None or not w.rv_lost or w.rv != old_rv:
            return
        ov = self.overlay
        sub = ov.subgroup_of_worker(peer)
        if sub is None:
            # dropped from the registry while silent: register afresh
            self._start_worker(peer, self.service_specs[w.service_group])
            sub = ov.subgroup_of_worker(peer) or ov.subgroup_of_rv(peer)
            w.reconnect(self, ov.tables[sub.group_id].rv, old_rv)
            return
        rv = ov.tables[sub.group_id].rv
        if not ov.alive(rv):
            # no rendezvous announced itself: compete for the role
            self.kernel.after(self.params.election_delay, KERNEL, ("election", sub.group_id, rv))
            self.timer(self.params.rv_wait_timeout, peer, "rv_wait", old_rv)
        elif ov.connected(peer, rv):
            w.reconnect(self, rv, old_rv)
        else:
            self.timer(self.params.rv_wait_timeout, peer, "rv_wait", old_rv)

    # -- messages --------------------------------------------------------

    def _on_message(self, peer: int, src: int, msg) -> None:
        ep = self.entrypoints.get(peer)
        w = self.workers.get(peer)
        if isinstance(msg, QuerySubmit):
            if ep is not None and ep.service_group == msg.query.service_group:
                ep.handle_query(self, msg.query, retry=msg.retry)
            elif not msg.retry:
                self.emit("query_rejected", peer, query_id=msg.query.query_id, reason="not_entry_point")
        elif isinstance(msg, QueryRoute):
            if ep is not None:
                ep.handle_route(self, msg)
        elif isinstance(msg, QueryForward):
            if w is not None:
                w.handle_query(self, msg)
        elif isinstance(msg, QueryServiced):
            if ep is not None:
                ep.handle_query_serviced(self, msg.query_id, msg.worker)
        elif isinstance(msg, ServicedAck):
            if w is not None:
                w.handle_serviced_ack(msg.query_id)
        elif isinstance(msg, QueryCancel):
            if w is not None:
                w.handle_cancel(self, msg.query_id)
        elif isinstance(msg, Busy):
            if ep is not None:
                ep.handle_busy(self, msg.query_id, msg.worker)
        elif isinstance(msg, QueryReply):
            self._on_reply(peer, msg)
        elif isinstance(msg, Heartbeat):
            self._on_heartbeat(peer, msg)
        elif isinstance(msg, HeartbeatAck):
            if w is not None:
                w.handle_heartbeat_ack()
        elif isinstance(msg, RvHeartbeat):
            mon = self.monitors.get(peer)
            if mon is not None:
                mon.record_rv_heartbeat(msg.sender, self.now)
        elif isinstance(msg, TableExchange):
            mon = self.monitors.get(peer)
            if mon is not None and mon.merge(msg):
                ep.retry_pending(self)
        elif isinstance(msg, RvAnnounce):
            self._on_announce(peer, msg)
        elif isinstance(msg, Reregister):
            self._on_reregister(peer, msg)
        elif isinstance(msg, SpawnOrder):
            if peer not in self.workers:
                self._start_worker(peer, self.scenario.service(msg.service))
        else:  # pragma: no cover - exhaustive over message types
            raise TypeError(f"unhandled message {msg!r}")

    def _on_heartbeat(self, rv: int, hb: Heartbeat) -> None:
        mon = self.monitors.get(rv)
        if mon is None:
            return
        ep = self.entrypoints[rv]
        row = mon.record_heartbeat(hb, self.now, ep.cache.load_of(hb.sender))
        if row is None:
            self.emit("heartbeat", rv, sender=hb.sender, sent_at=hb.sent_at, threshold=hb.threshold,
                      ignored=1)
            return
        self.emit("heartbeat", rv, sender=hb.sender, sent_at=hb.sent_at, threshold=hb.threshold,
                  delay=row.network_delay)
        self.send(rv, hb.sender, HeartbeatAck(hb.sent_at))
        ep.retry_pending(self)

    def _on_reply(self, peer: int, msg: QueryReply) -> None:
        st = self.clients.get(peer)
        if st is None:
            return
        if msg.query_id in st.replied:
            self.emit("duplicate_reply", peer, query_id=msg.query_id, worker=msg.worker)
        else:
            st.replied.add(msg.query_id)
            st.outstanding.pop(msg.query_id, None)
            self.emit("query_replied", peer, query_id=msg.query_id, worker=msg.worker)

    def _on_announce(self, peer: int, msg: RvAnnounce) -> None:
        w = self.workers.get(peer)
        if w is not None and (w.rv != msg.rv or w.rv_lost):
            w.reconnect(self, msg.rv, msg.previous)
        st = self.clients.get(peer)
        if st is not None:
            for name, (gid, ep) in list(st.joined.items()):
                if ep == msg.previous:
                    st.joined[name] = (gid, msg.rv)
            for qid, (q, ep) in sorted(st.outstanding.items()):
                if ep == msg.previous:
                    st.outstanding[qid] = (q, msg.rv)
                    self.send(peer, msg.rv, QuerySubmit(q, retry=True))

    def _on_reregister(self, rv: int, msg: Reregister) -> None:
        ep = self.entrypoints.get(rv)
        if ep is None:
            return
        if self.overlay.subgroup_of_worker(msg.worker) is None and msg.worker != rv:
            try:
                self.overlay.register_with_rv(msg.worker, rv)
            except RvDead:
                return
            self._refresh_service(ep.service_group)
        mon = self.monitors[rv]
        if msg.worker in self.workers:
            mon.add_worker(msg.worker, self.now, self.workers[msg.worker].threshold.T)
        ep.absorb_report(self, msg)
