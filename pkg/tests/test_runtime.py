import dataclasses
from fractions import Fraction

from hypothesis import HealthCheck, given, settings, strategies as st

from conscientia.runtime import Simulation
from conscientia.scenario import TimelineEvent, load_scenario
from conscientia.trace import check_query_lifecycles, serialize_trace, summarize
from conftest import corpus_path, corpus_run


def scenario(name, **params):
    sc = load_scenario(corpus_path(name))
    if params:
        sc.params = dataclasses.replace(sc.params, **params)
    return sc


def of(records, ev, **match):
    return [r for r in records if r.ev == ev and all(r.d.get(k) == v for k, v in match.items())]


def test_revived_worker_registers_again():
    sc = scenario("worker-kill")
    sc.timeline.append(TimelineEvent(8000, "revive_peer", peer=3))
    recs = Simulation(sc, check_invariants=True).run()
    regs = of(recs, "registered", role="worker")
    assert [r.t for r in regs if r.actor == 3][-1] >= 8000
    assert [r for r in of(recs, "query_scheduled") if r.d["worker"] == 3 and r.t > 8000]


def test_sole_worker_promotes_itself():
    sc = scenario("baseline")
    sc.services[0].workers = [1, 2]
    sc.peers = [p for p in sc.peers if p.id in (1, 2, 10)]
    sc.timeline = [TimelineEvent(4000, "kill_peer", peer=1)]
    recs = Simulation(sc, check_invariants=True).run()
    (el,) = of(recs, "election")
    assert el.d["winner"] == 2
    launched = [r.d["kind"] for r in of(recs, "spawn", host=2, result="ok") if r.t == el.t]
    assert launched == ["EntryPoint", "Monitoring"]
    late = [r for r in of(recs, "query_replied") if r.t > el.t]
    assert late and all(r.d["worker"] == 2 for r in late)


def test_rv_kill_downstream_chain():
    _, recs = corpus_run("rv-kill")
    kinds = [r.ev for r in recs if r.ev in ("failure_detected", "election", "spawn")]
    assert kinds.index("failure_detected") < kinds.index("election") < kinds.index("spawn")


def test_heal_emits_merged_view():
    _, recs = corpus_run("partition-merge-split")
    (heal,) = of(recs, "heal")
    assert "Render" in heal.d["visible_10"] and "Lookup" in heal.d["visible_10"]


def test_saturation_spawns_on_spare():
    sim, recs = corpus_run("saturation-decay")
    (sp,) = of(recs, "spawn", kind="WorkerService")
    assert sp.d["host"] == 8
    assert of(recs, "query_scheduled", worker=8)


def test_saturation_thresholds_reach_fixed_points():
    sim, recs = corpus_run("saturation-decay")
    for w in sim.workers.values():
        assert 1 <= w.threshold.T <= 100
    drops = of(recs, "threshold_update")
    assert drops[0].d["t_old"] == 100


def test_run_until_stops_early():
    recs = Simulation(scenario("baseline")).run(until=3000)
    assert recs[-1].ev == "run_end"
    assert max(r.t for r in recs[:-1]) <= 3000


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 2**64 - 1), jitter=st.integers(0, 8), loss=st.sampled_from([0, 1, 2]))
def test_lossy_runs_keep_invariants(seed, jitter, loss):
    sc = scenario("worker-kill", jitter_max=jitter, loss_prob=Fraction(loss, 50))
    a = Simulation(sc, seed=seed, check_invariants=True).run()
    b = Simulation(sc, seed=seed).run()
    assert serialize_trace(a) == serialize_trace(b)
    report = summarize(a)
    assert report.queries_serviced <= report.queries_submitted
    serviced = {}
    for r in a:
        if r.ev == "query_serviced":
            serviced[r.d["query_id"]] = serviced.get(r.d["query_id"], 0) + 1
    assert all(n == 1 for n in serviced.values())
    if loss == 0:
        assert check_query_lifecycles(a) == []
