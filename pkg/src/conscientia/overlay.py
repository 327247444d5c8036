"""Peer and group state: the group tree, scoped discovery, worker registration
with rendezvous capacity splitting, rendezvous election and merge visibility.

Merging is a visibility overlay. Group ids are never unified: a group is
visible to a peer when at least one of its live members sits in the peer's
partition component, and Root or Category groups with the same name path are
treated as one logical group for discovery and joins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .errors import (
    GroupNotVisible,
    NoCandidates,
    NotAMember,
    ParentNotJoined,
    RvDead,
)
from .trace import Tracer


class GroupKind(str, Enum):
    ROOT = "Root"
    CATEGORY = "Category"
    SERVICE = "Service"
    WORKER_SUBGROUP = "WorkerSubgroup"
    EPM = "EPM"


class Role(str, Enum):
    RENDEZVOUS = "Rendezvous"
    WORKER = "Worker"
    CLIENT = "Client"


_PARENT_KINDS = {
    GroupKind.ROOT: (),
    GroupKind.CATEGORY: (GroupKind.ROOT, GroupKind.CATEGORY),
    GroupKind.SERVICE: (GroupKind.CATEGORY,),
    GroupKind.WORKER_SUBGROUP: (GroupKind.SERVICE,),
    GroupKind.EPM: (GroupKind.SERVICE,),
}

ROOT_NAME = "CONSCIENTIA"


@dataclass
class GroupRecord:
    group_id: int
    kind: GroupKind
    name: str
    parent: int | None
    rv_peers: list[int] = field(default_factory=list)
    members: list[int] = field(default_factory=list)
    query_format: str | None = None
    published_at: int = 0


@dataclass(frozen=True)
class Advertisement:
    group_id: int
    kind: GroupKind
    name: str
    query_format: str | None
    published_at: int


@dataclass
class RegistrationTable:
    rv: int
    r_max: int
    registered: list[int] = field(default_factory=list)

    def has_room(self) -> bool:
        return len(self.registered) < self.r_max


@dataclass
class PeerRecord:
    peer: int
    network: str = "default"
    alive: bool = True
    roles: dict[int, Role] = field(default_factory=dict)
    services: set[str] = field(default_factory=set)
    # group_id -> rv the peer is attached to in that group
    assigned: dict[int, int] = field(default_factory=dict)


class Overlay:
    def __init__(self, *, r_max: int = 16, tracer: Tracer | None = None,
                 clock: Callable[[], int] = lambda: 0,
                 connected: Callable[[int, int], bool] = lambda a, b: True) -> None:
        self.r_max = r_max
        self.tracer = tracer or Tracer()
        self.clock = clock
        self.connected = connected
        self.peers: dict[int, PeerRecord] = {}
        self.groups: dict[int, GroupRecord] = {}
        # WorkerSubgroup id -> table of its RV
        self.tables: dict[int, RegistrationTable] = {}
        # (Root id, rv) -> table of root-level attachments
        self.root_tables: dict[tuple[int, int], RegistrationTable] = {}
        self._next_gid = 1

    # -- helpers ---------------------------------------------------------

    def add_peer(self, peer: int, network: str = "default") -> PeerRecord:
        rec = self.peers.get(peer)
        if rec is None:
            rec = self.peers[peer] = PeerRecord(peer, network)
        return rec

    def alive(self, peer: int) -> bool:
        rec = self.peers.get(peer)
        return rec is not None and rec.alive

    def _emit(self, ev: str, actor, **d) -> None:
        self.tracer.emit(self.clock(), ev, actor, **d)

    def _create_group(self, kind: GroupKind, name: str, parent: int | None, creator: int,
                      query_format: str | None = None) -> GroupRecord:
        if kind is GroupKind.ROOT:
            assert parent is None
        else:
            assert self.groups[parent].kind in _PARENT_KINDS[kind], (kind, parent)
        g = GroupRecord(self._next_gid, kind, name, parent, [creator], [creator],
                        query_format if kind is GroupKind.SERVICE else None, self.clock())
        self._next_gid += 1
        self.groups[g.group_id] = g
        self.peers[creator].roles[g.group_id] = Role.RENDEZVOUS
        self.peers[creator].assigned[g.group_id] = creator
        self._emit("group_created", creator, group=g.group_id, kind=kind.value, name=name,
                   parent=-1 if parent is None else parent)
        return g

    def children(self, gid: int) -> list[GroupRecord]:
        return [g for g in self.groups.values() if g.parent == gid]

    def name_path(self, gid: int) -> tuple[str, ...]:
        names = []
        g = self.groups[gid]
        while g.parent is not None:
            names.append(g.name)
            g = self.groups[g.parent]
        return tuple(reversed(names))

    def visible(self, peer: int, gid: int) -> bool:
        g = self.groups.get(gid)
        if g is None:
            return False
        return any(self.alive(m) and self.connected(peer, m) for m in g.members)

    def equivalents(self, peer: int, gid: int) -> list[int]:
        """Visible groups that merge with ``gid`` from ``peer``'s point of view."""
        g = self.groups[gid]
        if g.kind not in (GroupKind.ROOT, GroupKind.CATEGORY):
            return [gid] if self.visible(peer, gid) else []
        path = self.name_path(gid)
        return [o.group_id for o in self.groups.values()
                if o.kind is g.kind and self.name_path(o.group_id) == path
                and self.visible(peer, o.group_id)]

    def is_member(self, peer: int, gid: int) -> bool:
        return peer in self.groups[gid].members

    def _joined_equivalent(self, peer: int, gid: int) -> bool:
        return any(self.is_member(peer, e) for e in self.equivalents(peer, gid)) \
            or self.is_member(peer, gid)

    def root_of(self, peer: int) -> int | None:
        roots = [g.group_id for g in self.groups.values()
                 if g.kind is GroupKind.ROOT and self.is_member(peer, g.group_id)
                 and self.visible(peer, g.group_id)]
        return min(roots) if roots else None

    def check_well_formed(self) -> None:
        """Raise AssertionError if the group tree breaks a hierarchy rule."""
        for g in self.groups.values():
            if g.kind is GroupKind.ROOT:
                assert g.parent is None, g
            else:
                assert self.groups[g.parent].kind in _PARENT_KINDS[g.kind], g
            seen = set()
            cur = g
            while cur.parent is not None:
                assert cur.group_id not in seen, "cycle"
                seen.add(cur.group_id)
                cur = self.groups[cur.parent]
        for table in list(self.tables.values()) + list(self.root_tables.values()):
            assert len(table.registered) <= table.r_max, table

    # -- bootstrap and joins --------------------------------------------

    def bootstrap_peer(self, peer: int) -> tuple[str, int]:
        rec = self.peers[peer]
        rec.alive = True
        roots = sorted(g.group_id for g in self.groups.values()
                       if g.kind is GroupKind.ROOT and self.visible(peer, g.group_id))
        if roots:
            rv = self.join_group(peer, roots[0])
            self._emit("peer_bootstrap", peer, result="joined-root", root=roots[0], rv=rv)
            return "joined-root", roots[0]
        g = self._create_group(GroupKind.ROOT, ROOT_NAME, None, peer)
        self.root_tables[(g.group_id, peer)] = RegistrationTable(peer, self.r_max)
        self._emit("peer_bootstrap", peer, result="created-root", root=g.group_id, rv=peer)
        return "created-root", g.group_id

    def _pick_rv(self, g: GroupRecord) -> int:
        live = [p for p in g.rv_peers if self.alive(p)] or list(g.rv_peers)
        load = {p: 0 for p in live}
        for m in g.members:
            a = self.peers[m].assigned.get(g.group_id)
            if a in load and a != m:
                load[a] += 1
        return min(live, key=lambda p: (load[p], p))

    def join_group(self, peer: int, gid: int) -> int:
        g = self.groups.get(gid)
        if g is None or not self.visible(peer, gid):
            raise GroupNotVisible(gid)
        if g.parent is not None and not self._joined_equivalent(peer, g.parent):
            raise ParentNotJoined(gid)
        rec = self.peers[peer]
        if peer not in g.members:
            g.members.append(peer)
        if g.kind is GroupKind.ROOT:
            rv = self._attach_root(peer, g)
        elif peer in g.rv_peers:
            rv = peer
        else:
            rv = self._pick_rv(g)
        rec.assigned[gid] = rv
        rec.roles.setdefault(gid, Role.RENDEZVOUS if peer in g.rv_peers else Role.CLIENT)
        self._emit("joined", peer, group=gid, kind=g.kind.value, rv=rv)
        return rv

    def _attach_root(self, peer: int, g: GroupRecord) -> int:
        if peer in g.rv_peers:
            return peer
        tables = [self.root_tables[(g.group_id, rv)] for rv in g.rv_peers
                  if self.alive(rv) and (g.group_id, rv) in self.root_tables]
        open_tables = [t for t in tables if t.has_room()]
        if not open_tables:
            # every root RV is full: promote the lowest alive non-RV member
            candidates = sorted(m for m in g.members if self.alive(m) and m not in g.rv_peers
                                and self.connected(peer, m))
            new_rv = candidates[0]
            for t in tables:
                if new_rv in t.registered:
                    t.registered.remove(new_rv)
            g.rv_peers.append(new_rv)
            self.peers[new_rv].roles[g.group_id] = Role.RENDEZVOUS
            self.peers[new_rv].assigned[g.group_id] = new_rv
            table = self.root_tables[(g.group_id, new_rv)] = RegistrationTable(new_rv, self.r_max)
            self._emit("registered", new_rv, group=g.group_id, rv=new_rv, role="rendezvous",
                       size=0, r_max=self.r_max)
            if new_rv == peer:
                return peer
            open_tables = [table]
        table = min(open_tables, key=lambda t: (len(t.registered), t.rv))
        table.registered.append(peer)
        return table.rv

    def discover_advertisements(self, peer: int, scope: int) -> list[Advertisement]:
        if scope not in self.groups or not self._joined_equivalent(peer, scope):
            raise NotAMember(scope)
        scopes = set(self.equivalents(peer, scope)) | {scope}
        found: dict[object, GroupRecord] = {}
        for g in sorted(self.groups.values(), key=lambda g: g.group_id):
            if g.parent not in scopes or not self.visible(peer, g.group_id):
                continue
            # identically named categories collapse to the lowest group id
            key = ("cat", g.name) if g.kind is GroupKind.CATEGORY else g.group_id
            found.setdefault(key, g)
        return [Advertisement(g.group_id, g.kind, g.name, g.query_format, g.published_at)
                for g in sorted(found.values(), key=lambda g: g.group_id)]

    # -- services and workers -------------------------------------------

    def service_subgroups(self, service: int) -> list[GroupRecord]:
        return sorted((g for g in self.children(service) if g.kind is GroupKind.WORKER_SUBGROUP),
                      key=lambda g: g.group_id)

    def epm_of(self, service: int) -> GroupRecord:
        return next(g for g in self.children(service) if g.kind is GroupKind.EPM)

    def subgroup_of_rv(self, rv: int) -> GroupRecord | None:
        for gid, t in self.tables.items():
            if t.rv == rv:
                return self.groups[gid]
        return None

    def subgroup_of_worker(self, worker: int) -> GroupRecord | None:
        for gid, t in self.tables.items():
            if worker in t.registered:
                return self.groups[gid]
        return None

    def _find_child(self, peer: int, parents: list[int], kind: GroupKind, name: str) -> GroupRecord | None:
        for g in sorted(self.groups.values(), key=lambda g: g.group_id):
            if g.parent in parents and g.kind is kind and g.name == name and self.visible(peer, g.group_id):
                return g
        return None

    def ensure_group_path(self, worker: int, path: list[str], service_name: str,
                          query_format: str = ".*", *, host_worker: bool = True) -> int:
        """Make sure the category path and service exist, then register the worker.

        Returns the Service group id. When the service is created here the
        creating peer becomes RV of its first worker subgroup; with
        ``host_worker=False`` it acts as a pure rendezvous.
        """
        root = self.root_of(worker)
        if root is None:
            raise ParentNotJoined("worker has not joined a root group")
        parents = self.equivalents(worker, root)
        parent_gid = root
        for name in path:
            cat = self._find_child(worker, parents, GroupKind.CATEGORY, name)
            if cat is None:
                cat = self._create_group(GroupKind.CATEGORY, name, parent_gid, worker)
            elif worker not in cat.members:
                self.join_group(worker, cat.group_id)
            parent_gid = cat.group_id
            parents = self.equivalents(worker, cat.group_id)
        svc = self._find_child(worker, parents, GroupKind.SERVICE, service_name)
        if svc is None:
            svc = self._create_group(GroupKind.SERVICE, service_name, parent_gid, worker, query_format)
            sub = self._create_group(GroupKind.WORKER_SUBGROUP, f"{service_name}/workers-1",
                                     svc.group_id, worker)
            self._create_group(GroupKind.EPM, f"{service_name}/epm", svc.group_id, worker)
            self.tables[sub.group_id] = RegistrationTable(worker, self.r_max)
            if host_worker:
                self.peers[worker].services.add("WorkerService")
            self.peers[worker].services |= {"EntryPoint", "Monitoring"}
            return svc.group_id
        if worker not in svc.members:
            svc.members.append(worker)
            self.peers[worker].roles.setdefault(svc.group_id, Role.WORKER)
        self.peers[worker].services.add("WorkerService")
        subs = [g for g in self.service_subgroups(svc.group_id)
                if self.alive(self.tables[g.group_id].rv)
                and self.connected(worker, self.tables[g.group_id].rv)]
        if not subs:
            # every RV of this service is gone or unreachable: take over the first subgroup
            subs = self.service_subgroups(svc.group_id)
        open_subs = [g for g in subs if self.tables[g.group_id].has_room()]
        target = (open_subs or subs)[0]
        self.register_with_rv(worker, self.tables[target.group_id].rv)
        return svc.group_id

    def register_with_rv(self, worker: int, rv: int) -> tuple[str, int]:
        sub = self.subgroup_of_rv(rv)
        if sub is None or not self.alive(rv):
            raise RvDead(rv)
        table = self.tables[sub.group_id]
        if worker == rv or worker in table.registered:
            return "accepted", rv
        if table.has_room():
            self._add_registration(sub, table, worker)
            return "accepted", rv
        candidates = sorted(p for p in table.registered if self.alive(p))
        promoted = candidates[0]
        table.registered.remove(promoted)
        sub.members.remove(promoted)
        service = self.groups[sub.parent]
        n = len(self.service_subgroups(service.group_id)) + 1
        new_sub = self._create_group(GroupKind.WORKER_SUBGROUP, f"{service.name}/workers-{n}",
                                     service.group_id, promoted)
        new_table = self.tables[new_sub.group_id] = RegistrationTable(promoted, self.r_max)
        self._epm_add(service.group_id, promoted)
        self.peers[promoted].services |= {"EntryPoint", "Monitoring"}
        self._emit("rv_split", rv, old_subgroup=sub.group_id, new_subgroup=new_sub.group_id,
                   new_rv=promoted, size=len(table.registered), r_max=self.r_max)
        self._add_registration(new_sub, new_table, worker)
        return "redirected", promoted

    def _add_registration(self, sub: GroupRecord, table: RegistrationTable, worker: int) -> None:
        table.registered.append(worker)
        if worker not in sub.members:
            sub.members.append(worker)
        rec = self.peers[worker]
        rec.roles[sub.group_id] = Role.WORKER
        rec.assigned[sub.group_id] = table.rv
        self._emit("registered", worker, group=sub.group_id, rv=table.rv, role="worker",
                   size=len(table.registered), r_max=table.r_max)

    def _epm_add(self, service: int, rv: int) -> None:
        epm = self.epm_of(service)
        svc = self.groups[service]
        for g in (epm, svc):
            if rv not in g.rv_peers:
                g.rv_peers.append(rv)
            if rv not in g.members:
                g.members.append(rv)
            self.peers[rv].roles[g.group_id] = Role.RENDEZVOUS
            self.peers[rv].assigned[g.group_id] = rv

    def _epm_remove(self, service: int, rv: int) -> None:
        for g in (self.epm_of(service), self.groups[service]):
            if rv in g.rv_peers:
                g.rv_peers.remove(rv)
            if g.kind is GroupKind.EPM:
                if rv in g.members:
                    g.members.remove(rv)
                self.peers[rv].roles.pop(g.group_id, None)

    def deregister(self, worker: int) -> int | None:
        """Drop a worker from whichever table holds it; returns the subgroup id."""
        sub = self.subgroup_of_worker(worker)
        if sub is None:
            return None
        self.tables[sub.group_id].registered.remove(worker)
        if worker in sub.members:
            sub.members.remove(worker)
        self.peers[worker].roles.pop(sub.group_id, None)
        return sub.group_id

    def elect_rendezvous(self, subgroup: int) -> int:
        """Promote the lowest alive member of ``subgroup`` to rendezvous."""
        sub = self.groups[subgroup]
        table = self.tables[subgroup]
        old = table.rv
        service = sub.parent
        candidates = sorted(p for p in table.registered if self.alive(p))
        if not candidates:
            self._epm_remove(service, old)
            del self.tables[subgroup]
            del self.groups[subgroup]
            raise NoCandidates(subgroup)
        winner = candidates[0]
        table.registered.remove(winner)
        table.rv = winner
        sub.rv_peers = [winner]
        if old in sub.members:
            sub.members.remove(old)
        self.peers[winner].roles[subgroup] = Role.RENDEZVOUS
        self.peers[winner].assigned[subgroup] = winner
        for w in table.registered:
            self.peers[w].assigned[subgroup] = winner
        self._epm_remove(service, old)
        self._epm_add(service, winner)
        self.peers[winner].services |= {"EntryPoint", "Monitoring"}
        # clients attached to the old entry point follow the winner
        svc = self.groups[service]
        for m in svc.members:
            if self.peers[m].assigned.get(service) == old:
                self.peers[m].assigned[service] = winner
        return winner

    def retire_rendezvous(self, subgroup: int, into: int) -> list[int]:
        """Fold ``subgroup`` into sibling ``into``; its RV becomes a worker there.

        Returns the workers moved (including the former RV).
        """
        sub = self.groups[subgroup]
        table = self.tables.pop(subgroup)
        target = self.tables[into]
        service = sub.parent
        moved = sorted(table.registered) + [table.rv]
        self._epm_remove(service, table.rv)
        del self.groups[subgroup]
        for w in moved:
            self.peers[w].roles.pop(subgroup, None)
            self._add_registration(self.groups[into], target, w)
            self.peers[w].services.add("WorkerService")
        return moved

    # -- peer lifecycle and partitions ----------------------------------

    def kill(self, peer: int) -> None:
        self.peers[peer].alive = False
        # Root/Category rendezvous duty passes to the lowest alive member at once
        for g in self.groups.values():
            if g.kind in (GroupKind.ROOT, GroupKind.CATEGORY) and peer in g.rv_peers:
                if all(not self.alive(r) for r in g.rv_peers):
                    heirs = sorted(m for m in g.members if self.alive(m) and self.connected(peer, m))
                    if heirs:
                        heir = heirs[0]
                        g.rv_peers.append(heir)
                        self.peers[heir].roles[g.group_id] = Role.RENDEZVOUS
                        self.peers[heir].assigned[g.group_id] = heir
                        if g.kind is GroupKind.ROOT:
                            for key, t in list(self.root_tables.items()):
                                if key[0] == g.group_id and heir in t.registered:
                                    t.registered.remove(heir)
                            self.root_tables.setdefault((g.group_id, heir),
                                                        RegistrationTable(heir, self.r_max))
                        self._emit("joined", heir, group=g.group_id, kind=g.kind.value,
                                   rv=heir, role="rendezvous")

    def forget(self, peer: int) -> list[int]:
        """Clear a peer's volatile memberships before it re-bootstraps.

        Returns worker subgroups left without a rendezvous.
        """
        orphaned = []
        self.deregister(peer)
        for gid, t in self.tables.items():
            if t.rv == peer:
                orphaned.append(gid)
        for key, t in self.root_tables.items():
            if peer in t.registered:
                t.registered.remove(peer)
        rec = self.peers[peer]
        rec.services.clear()
        return orphaned

    def visible_services(self, peer: int) -> list[GroupRecord]:
        """All service groups ``peer`` could reach by walking the merged tree."""
        root = self.root_of(peer)
        if root is None:
            return []
        out = []
        frontier = [root]
        seen = set()
        while frontier:
            gid = frontier.pop(0)
            for e in self.equivalents(peer, gid) or [gid]:
                if e in seen:
                    continue
                seen.add(e)
                for c in self.children(e):
                    if not self.visible(peer, c.group_id):
                        continue
                    if c.kind is GroupKind.SERVICE:
                        out.append(c)
                    elif c.kind is GroupKind.CATEGORY:
                        frontier.append(c.group_id)
        return sorted({g.group_id: g for g in out}.values(), key=lambda g: g.group_id)

    def recompute_visibility(self, change: str, observers: list[int]) -> dict[int, str]:
        """Snapshot discoverable services per observer after a topology change.

        Visibility itself is computed on demand, so this only reports it.
        """
        assert change in ("heal", "split")
        return {p: ",".join(f"{g.name}#{g.group_id}" for g in self.visible_services(p))
                for p in observers if self.alive(p)}
