import pytest
from hypothesis import given, strategies as st

from conscientia.messages import (
    Busy, Heartbeat, PipeRef, Query, QueryForward, QueryReply, QueryServiced, Reregister,
)
from conscientia.worker import (
    ServiceTime, ThresholdState, WorkerService, threshold_raw, update_threshold,
)
from oracles import threshold_oracle


@pytest.mark.parametrize("t_old,qx,expected", [(10, 10, 9), (10, 8, 4), (10, 0, 1), (7, 7, 7)])
def test_update_threshold_anchors(t_old, qx, expected):
    assert update_threshold(t_old, qx) == expected


def test_raw_value_before_clamp():
    assert threshold_raw(10, 4) == -4
    assert update_threshold(10, 4) == 1


def test_negative_qx_rejected():
    with pytest.raises(ValueError):
        update_threshold(5, -1)


@given(st.integers(1, 5000), st.integers(0, 5000), st.integers(1, 20))
def test_update_matches_oracle(t_old, qx, t_min):
    qx = min(qx, t_old)
    got = update_threshold(t_old, qx, t_min)
    assert got == threshold_oracle(t_old, qx, t_min)
    assert got >= t_min


@given(st.integers(1, 1000), st.integers(0, 1000))
def test_threshold_never_grows(t_old, qx):
    assert update_threshold(t_old, min(qx, t_old)) <= t_old


def test_full_load_decay_from_100():
    seq = [100]
    while len(seq) < 8:
        seq.append(update_threshold(seq[-1], seq[-1]))
    assert seq == [100, 90, 81, 73, 66, 60, 54, 49]


@pytest.mark.parametrize("t", range(1, 10))
def test_small_thresholds_are_full_load_fixed_points(t):
    assert update_threshold(t, t) == t


def test_threshold_state_window():
    ts = ThresholdState(10)
    ts.Q_count = 4
    assert ts.close_window(2000) == (10, 4, -4, 1)
    assert (ts.T, ts.Q_count, ts.window_start) == (1, 0, 2000)


def test_threshold_state_below_min():
    with pytest.raises(ValueError):
        ThresholdState(0)


def _worker(T=5, st=(40, 40)):
    return WorkerService(7, 3, 1, ThresholdState(T), ServiceTime(*st), "q.*")


def _fwd(qid, payload="q"):
    return QueryForward(Query(qid, PipeRef(20, 1), 3, payload, 0), 1)


def test_accepts_below_threshold(stub):
    w = _worker()
    assert w.handle_query(stub, _fwd(1)) == "accepted"


def test_busy_at_threshold(stub):
    w = _worker(T=5)
    for i in range(5):
        w.handle_query(stub, _fwd(i))
    assert w.handle_query(stub, _fwd(99)) == "busy"
    assert stub.messages(Busy)[0][1] == 1


def test_completion_is_timed_by_service_time(stub):
    stub.now = 100
    w = _worker()
    w.handle_query(stub, _fwd(1))
    assert stub.timers[-1] == (140, 7, "complete", 1)


def test_normal_completion_replies_and_reports(stub):
    w = _worker()
    w.handle_query(stub, _fwd(1))
    w.complete_query(stub, 1)
    kinds = [(type(m).__name__, dst) for _, dst, m in stub.sent]
    assert kinds == [("QueryReply", 20), ("QueryServiced", 1)]
    assert w.threshold.Q_count == 1


def test_completion_during_outage_holds_serviced(stub):
    w = _worker()
    w.handle_query(stub, _fwd(1))
    w.rv_lost = True
    w.complete_query(stub, 1)
    assert [type(m) for _, _, m in stub.sent] == [QueryReply]
    assert w.outbox == [("serviced", _fwd(1).query)]


def test_cancel_before_completion_suppresses_reply(stub):
    w = _worker()
    w.handle_query(stub, _fwd(1))
    w.handle_cancel(stub, 1)
    w.complete_query(stub, 1)
    assert stub.sent == []
    assert stub.events("cancelled")[0].d["stage"] == "in_flight"


def test_malformed_payload(stub):
    assert _worker().handle_query(stub, _fwd(1, payload="zzz")) == "malformed"


def test_window_close_with_no_queries_clamps(stub):
    w = _worker(T=10)
    w.start(stub)
    stub.now = 2000
    w.heartbeat_tick(stub)
    (rec,) = stub.events("threshold_update")
    assert (rec.d["t_old"], rec.d["raw"], rec.d["clamped"]) == (10, 0, 1)


def test_mid_window_tick_only_heartbeats(stub):
    w = _worker(T=10)
    w.start(stub)
    stub.now = 500
    w.heartbeat_tick(stub)
    assert stub.events("threshold_update") == []
    assert w.threshold.T == 10
    assert isinstance(stub.sent[-1][2], Heartbeat)


def test_heartbeat_held_while_rv_down(stub):
    w = _worker()
    w.rv_lost = True
    w.heartbeat_tick(stub)
    assert stub.sent == []
    assert w.outbox[0][0] == "heartbeat"


def test_rv_loss_after_k_unacked(stub):
    w = _worker()
    for _ in range(stub.params.k + 1):
        w.heartbeat_tick(stub)
    assert w.rv_lost
    assert stub.events("failure_detected")[0].d["detector"] == "worker"
    assert stub.timers[-2][2] == "rv_wait"


def test_reconnect_flushes_in_order(stub):
    w = _worker()
    w.handle_query(stub, _fwd(1))
    w.handle_query(stub, _fwd(2))
    w.rv_lost = True
    w.complete_query(stub, 1)
    w.heartbeat_tick(stub)
    stub.sent.clear()
    assert w.reconnect(stub, 4, 1) == (1, 2)
    msgs = [m for _, _, m in stub.sent]
    assert isinstance(msgs[0], Reregister)
    assert [q.query_id for q in msgs[0].in_progress] == [2]
    assert [q.query_id for q in msgs[0].serviced] == [1]
    assert isinstance(msgs[1], Heartbeat)
    assert {dst for _, dst, _ in stub.sent} == {4}
    assert not w.rv_lost and not w.outbox


def test_reconnect_with_empty_outbox(stub):
    w = _worker()
    w.rv_lost = True
    assert w.reconnect(stub, 4, 1) == (0, 0)
    assert len(stub.sent) == 1
