import pytest

from conscientia.errors import GroupNotVisible, NoCandidates
from conscientia.overlay import GroupKind, Overlay


def make(peers, r_max=16, parts=None):
    comp = {}
    for i, s in enumerate(parts or []):
        for p in s:
            comp[p] = i
    ov = Overlay(r_max=r_max, connected=lambda a, b: comp.get(a, -1) == comp.get(b, -1))
    for p in peers:
        ov.add_peer(p)
    return ov, comp


def kinds(ov):
    return sorted(g.kind.value for g in ov.groups.values())


def test_first_peer_creates_root():
    ov, _ = make([1])
    result, root = ov.bootstrap_peer(1)
    assert result == "created-root"
    assert ov.groups[root].rv_peers == [1]


def test_second_peer_joins_root():
    ov, _ = make([1, 2])
    ov.bootstrap_peer(1)
    assert ov.bootstrap_peer(2)[0] == "joined-root"


def test_disjoint_components_get_separate_roots():
    ov, _ = make([1, 2], parts=[{1}, {2}])
    assert ov.bootstrap_peer(1)[0] == ov.bootstrap_peer(2)[0] == "created-root"
    assert len([g for g in ov.groups.values() if g.kind is GroupKind.ROOT]) == 2


def test_first_service_builds_the_whole_path():
    ov, _ = make([1])
    ov.bootstrap_peer(1)
    ov.ensure_group_path(1, ["Database"], "Store")
    assert kinds(ov) == ["Category", "EPM", "Root", "Service", "WorkerSubgroup"]


def test_nested_categories():
    ov, _ = make([1])
    ov.bootstrap_peer(1)
    svc = ov.ensure_group_path(1, ["Gaming", "Xbox"], "Lobby")
    assert ov.name_path(svc)[-3:] == ("Gaming", "Xbox", "Lobby")


def test_existing_path_is_reused():
    ov, _ = make([1, 2])
    for p in (1, 2):
        ov.bootstrap_peer(p)
    a = ov.ensure_group_path(1, ["Database"], "Store")
    before = len(ov.groups)
    assert ov.ensure_group_path(2, ["Database"], "Store") == a
    assert len(ov.groups) == before
    assert ov.subgroup_of_worker(2) is not None


def test_client_walk_gets_three_assignments():
    ov, _ = make([1, 9])
    ov.bootstrap_peer(1)
    svc = ov.ensure_group_path(1, ["Database"], "Store", "sql.*")
    ov.bootstrap_peer(9)
    root = ov.root_of(9)
    (cat,) = ov.discover_advertisements(9, root)
    assert ov.join_group(9, cat.group_id) == 1
    (ad,) = ov.discover_advertisements(9, cat.group_id)
    assert ad.group_id == svc and ad.query_format == "sql.*"
    assert ov.join_group(9, svc) == 1
    assert set(ov.peers[9].assigned) == {root, cat.group_id, svc}


def test_discovery_is_scoped_to_direct_children():
    ov, _ = make([1, 2, 9])
    for p in (1, 2, 9):
        ov.bootstrap_peer(p)
    ov.ensure_group_path(1, ["Database"], "Store")
    ov.ensure_group_path(2, ["Gaming"], "Lobby")
    names = [a.name for a in ov.discover_advertisements(9, ov.root_of(9))]
    assert names == ["Database", "Gaming"]


def test_empty_scope():
    ov, _ = make([1])
    root = ov.bootstrap_peer(1)[1]
    assert ov.discover_advertisements(1, root) == []


def test_join_invisible_group():
    ov, comp = make([1, 2], parts=[{1}, {2}])
    root = ov.bootstrap_peer(1)[1]
    ov.bootstrap_peer(2)
    with pytest.raises(GroupNotVisible):
        ov.join_group(2, root)


def _service_with_workers(r_max, workers):
    ov, _ = make([1, *workers], r_max=r_max)
    ov.bootstrap_peer(1)
    svc = ov.ensure_group_path(1, ["C"], "S", host_worker=False)
    for w in workers:
        ov.bootstrap_peer(w)
        ov.ensure_group_path(w, ["C"], "S")
    return ov, svc


def test_third_worker_triggers_split():
    ov, svc = _service_with_workers(2, [2, 3, 4])
    assert len(ov.service_subgroups(svc)) == 2
    assert len(ov.tracer.of("rv_split")) == 1
    assert ov.epm_of(svc).rv_peers == [1, 2]
    ov.check_well_formed()


def test_first_registration_accepted():
    ov, svc = _service_with_workers(2, [])
    ov.add_peer(5)
    ov.bootstrap_peer(5)
    assert ov.register_with_rv(5, 1) == ("accepted", 1)


def test_election_picks_lowest_alive():
    ov, svc = _service_with_workers(16, [7, 3, 9])
    sub = ov.service_subgroups(svc)[0].group_id
    ov.kill(1)
    assert ov.elect_rendezvous(sub) == 3
    assert ov.tables[sub].registered == [7, 9]


def test_election_with_one_worker_left():
    ov, svc = _service_with_workers(16, [4])
    sub = ov.service_subgroups(svc)[0].group_id
    ov.kill(1)
    assert ov.elect_rendezvous(sub) == 4
    assert "WorkerService" in ov.peers[4].services


def test_election_without_candidates_dissolves_subgroup():
    ov, svc = _service_with_workers(16, [4])
    sub = ov.service_subgroups(svc)[0].group_id
    ov.kill(1)
    ov.kill(4)
    with pytest.raises(NoCandidates):
        ov.elect_rendezvous(sub)
    assert sub not in ov.tables
    assert 1 not in ov.epm_of(svc).rv_peers


def _two_islands():
    comp = {1: 0, 2: 0, 10: 0, 5: 1, 6: 1}
    state = {"split": True}
    ov = Overlay(connected=lambda a, b: not state["split"] or comp[a] == comp[b])
    for p in comp:
        ov.add_peer(p)
    for p in (1, 2, 10, 5, 6):
        ov.bootstrap_peer(p)
    ov.ensure_group_path(1, ["Database"], "S1")
    ov.ensure_group_path(5, ["Database"], "S2")
    return ov, state


def test_heal_merges_discovery():
    ov, state = _two_islands()
    assert ov.recompute_visibility("split", [10]) == {10: "S1#4"}
    state["split"] = False
    assert set(ov.recompute_visibility("heal", [10])[10].split(",")) == {"S1#4", "S2#8"}


def test_same_category_lists_once_after_heal():
    ov, state = _two_islands()
    state["split"] = False
    root = ov.root_of(10)
    cats = ov.discover_advertisements(10, root)
    assert [c.name for c in cats] == ["Database"]
    ov.join_group(10, cats[0].group_id)
    names = sorted(a.name for a in ov.discover_advertisements(10, cats[0].group_id))
    assert names == ["S1", "S2"]


def test_resplit_restricts_again():
    ov, state = _two_islands()
    state["split"] = False
    ov.recompute_visibility("heal", [10])
    state["split"] = True
    assert ov.recompute_visibility("split", [10]) == {10: "S1#4"}
