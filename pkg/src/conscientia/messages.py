"""Wire-level message types exchanged between simulated peers."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class PipeRef:
    owner: int
    pipe_id: int


@dataclass(frozen=True)
class Query:
    query_id: int
    client_pipe: PipeRef
    service_group: int
    payload: str
    submitted_at: int


# client -> entry point
@dataclass(frozen=True)
class QuerySubmit:
    query: Query
    # re-sent after an entry point change; ignored if already known
    retry: bool = False


# entry point -> worker
@dataclass(frozen=True)
class QueryForward:
    query: Query
    entry_rv: int


# entry point -> sibling subgroup RV (first step of two-step selection)
@dataclass(frozen=True)
class QueryRoute:
    query: Query
    from_rv: int
    attempts: int


@dataclass(frozen=True)
class QueryServiced:
    query_id: int
    worker: int


@dataclass(frozen=True)
class ServicedAck:
    query_id: int


@dataclass(frozen=True)
class QueryCancel:
    query_id: int


@dataclass(frozen=True)
class WorkerFailed:
    peer: int


@dataclass(frozen=True)
class QueryReply:
    query_id: int
    payload: str
    worker: int


@dataclass(frozen=True)
class Busy:
    query_id: int
    worker: int


@dataclass(frozen=True)
class Heartbeat:
    sender: int
    sent_at: int
    threshold: int


@dataclass(frozen=True)
class HeartbeatAck:
    sent_at: int


# RV <-> RV liveness inside the EPM group
@dataclass(frozen=True)
class RvHeartbeat:
    sender: int
    sent_at: int


@dataclass(frozen=True)
class TableExchange:
    sender: int
    subgroup: int
    slot: int
    rows: tuple
    schedule: tuple
    pending: tuple
    # ids of queries this entry point has recorded as serviced
    done: tuple = ()


@dataclass(frozen=True)
class SpawnOrder:
    kind: str
    host: int
    service: str = ""


@dataclass(frozen=True)
class RvAnnounce:
    rv: int
    subgroup: int
    previous: int


# worker -> new RV after reconnect: in-progress queries plus completed
# queries whose serviced message was never acknowledged
@dataclass(frozen=True)
class Reregister:
    worker: int
    in_progress: tuple
    serviced: tuple
