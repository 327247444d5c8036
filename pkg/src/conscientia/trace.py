"""Structured trace records, metrics aggregation and output writers.

Trace file layout (format 1)::

    format=1
    {"t":0,"seq":0,"ev":"peer_bootstrap","actor":1,"d":{...}}
    ...

Each record line is compact JSON with keys in the fixed order
``t, seq, ev, actor, d``; keys inside ``d`` are sorted. Values are integers
or strings only, so the bytes are identical across runs and platforms.
The kernel actor is written as the string ``"kernel"``.

Metrics file layout (format 1)::

    format=1
    <METRICS_COLUMNS joined by ','>
    <one row of values>
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

from .errors import MalformedTrace

FORMAT_LINE = "format=1"
KERNEL = "kernel"

EVENT_KINDS = frozenset(
    {
        "peer_bootstrap",
        "group_created",
        "joined",
        "registered",
        "rv_split",
        "election",
        "query_submitted",
        "query_scheduled",
        "query_rescheduled",
        "query_serviced",
        "query_cancelled",
        "duplicate_reply",
        "heartbeat",
        "failure_detected",
        "table_exchange",
        "spawn",
        "msg_dropped",
        "threshold_update",
        "partition",
        "heal",
        "late_serviced_ignored",
        "cancelled",
        # client-side first reply; latency is measured up to this record
        "query_replied",
        # entry point refused a query (duplicate id or malformed payload)
        "query_rejected",
        # closing record carrying run-level counters
        "run_end",
    }
)

METRICS_COLUMNS = (
    "queries_submitted",
    "queries_serviced",
    "duplicate_replies",
    "rescheduled",
    "elections",
    "rv_splits",
    "messages_sent",
    "messages_dropped",
    "availability",
    "availability_decimal",
    "latency_mean_ms",
    "latency_p50_ms",
    "latency_p95_ms",
    "latency_max_ms",
    "pending_depth_max",
)


def render_value(value):
    """Coerce a trace field value to its serialized form (int or str)."""
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, int):
        return value
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    if isinstance(value, str):
        return value
    if isinstance(value, (list, tuple)):
        return ",".join(str(render_value(v)) for v in value)
    raise TypeError(f"unsupported trace value {value!r}")


@dataclass(frozen=True)
class TraceRecord:
    t: int
    seq: int
    ev: str
    actor: int | str
    d: dict = field(default_factory=dict)

    def to_line(self) -> str:
        body = {"t": self.t, "seq": self.seq, "ev": self.ev, "actor": self.actor,
                "d": {k: self.d[k] for k in sorted(self.d)}}
        return json.dumps(body, separators=(",", ":"), ensure_ascii=True)

    @classmethod
    def from_line(cls, line: str) -> "TraceRecord":
        obj = json.loads(line)
        return cls(obj["t"], obj["seq"], obj["ev"], obj["actor"], obj["d"])


class Tracer:
    """Append-only trace stream owned by one simulation."""

    def __init__(self) -> None:
        self.records: list[TraceRecord] = []
        self._seq = 0

    def emit(self, t: int, ev: str, actor: int | str = KERNEL, **d) -> TraceRecord:
        if ev not in EVENT_KINDS:
            raise ValueError(f"unknown trace event kind {ev!r}")
        if self.records and t < self.records[-1].t:
            raise MalformedTrace(f"record at t={t} after t={self.records[-1].t}")
        rec = TraceRecord(t, self._seq, ev, actor, {k: render_value(v) for k, v in d.items()})
        self._seq += 1
        self.records.append(rec)
        return rec

    def of(self, *kinds: str) -> list[TraceRecord]:
        return [r for r in self.records if r.ev in kinds]

    def dumps(self) -> str:
        return serialize_trace(self.records)


def serialize_trace(records: Iterable[TraceRecord]) -> str:
    out = [FORMAT_LINE]
    out.extend(r.to_line() for r in records)
    return "\n".join(out) + "\n"


def parse_trace(text: str) -> list[TraceRecord]:
    lines = text.splitlines()
    if not lines or lines[0] != FORMAT_LINE:
        raise MalformedTrace("missing format header")
    return [TraceRecord.from_line(line) for line in lines[1:] if line]


@dataclass
class MetricsReport:
    queries_submitted: int = 0
    queries_serviced: int = 0
    duplicate_replies: int = 0
    rescheduled: int = 0
    elections: int = 0
    rv_splits: int = 0
    messages_sent: int = 0
    messages_dropped: int = 0
    availability: Fraction = Fraction(0)
    latency_mean_ms: Fraction = Fraction(0)
    latency_p50_ms: int = 0
    latency_p95_ms: int = 0
    latency_max_ms: int = 0
    pending_depth_max: int = 0

    def row(self) -> dict[str, str]:
        return {
            "queries_submitted": str(self.queries_submitted),
            "queries_serviced": str(self.queries_serviced),
            "duplicate_replies": str(self.duplicate_replies),
            "rescheduled": str(self.rescheduled),
            "elections": str(self.elections),
            "rv_splits": str(self.rv_splits),
            "messages_sent": str(self.messages_sent),
            "messages_dropped": str(self.messages_dropped),
            "availability": f"{self.availability.numerator}/{self.availability.denominator}",
            "availability_decimal": _decimal(self.availability, 6),
            "latency_mean_ms": _decimal(self.latency_mean_ms, 3),
            "latency_p50_ms": str(self.latency_p50_ms),
            "latency_p95_ms": str(self.latency_p95_ms),
            "latency_max_ms": str(self.latency_max_ms),
            "pending_depth_max": str(self.pending_depth_max),
        }

    def summary_text(self) -> str:
        row = self.row()
        return "\n".join(f"{k}: {row[k]}" for k in METRICS_COLUMNS) + "\n"


def _decimal(value: Fraction, places: int) -> str:
    scaled = value * 10**places
    # round half up on non-negative values
    q = (scaled.numerator * 2 + scaled.denominator) // (2 * scaled.denominator)
    whole, frac = divmod(q, 10**places)
    return f"{whole}.{frac:0{places}d}"


def _nearest_rank(sorted_values: list[int], pct: int) -> int:
    n = len(sorted_values)
    rank = max(1, -(-pct * n // 100))
    return sorted_values[rank - 1]


def summarize(records: Iterable[TraceRecord]) -> MetricsReport:
    """Aggregate a finished run's trace into a MetricsReport."""
    report = MetricsReport()
    submitted_at: dict[int, int] = {}
    latencies: list[int] = []
    prev = None
    for r in records:
        if prev is not None and (r.t, r.seq) <= (prev.t, prev.seq):
            raise MalformedTrace(f"record seq={r.seq} out of order")
        prev = r
        ev = r.ev
        if ev == "query_submitted":
            report.queries_submitted += 1
            submitted_at[r.d["query_id"]] = r.t
        elif ev == "query_replied":
            report.queries_serviced += 1
            start = submitted_at.get(r.d["query_id"])
            if start is not None:
                latencies.append(r.t - start)
        elif ev == "duplicate_reply":
            report.duplicate_replies += 1
        elif ev == "query_rescheduled":
            report.rescheduled += 1
        elif ev == "election":
            report.elections += 1
        elif ev == "rv_split":
            report.rv_splits += 1
        elif ev == "msg_dropped":
            report.messages_dropped += 1
        elif ev == "run_end":
            report.messages_sent = r.d.get("messages_sent", 0)
            report.pending_depth_max = r.d.get("pending_depth_max", 0)
    if report.queries_submitted:
        report.availability = Fraction(report.queries_serviced, report.queries_submitted)
    if latencies:
        latencies.sort()
        report.latency_mean_ms = Fraction(sum(latencies), len(latencies))
        report.latency_p50_ms = _nearest_rank(latencies, 50)
        report.latency_p95_ms = _nearest_rank(latencies, 95)
        report.latency_max_ms = latencies[-1]
    return report


def metrics_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    buf.write(FORMAT_LINE + "\n")
    writer = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerow(report.row())
    return buf.getvalue()


def write_outputs(records: Iterable[TraceRecord], report: MetricsReport,
                  trace_path: str | os.PathLike, metrics_path: str | os.PathLike) -> None:
    """Write the trace and metrics files. Raises OSError on I/O failure."""
    with open(trace_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(serialize_trace(records))
    with open(metrics_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(metrics_csv(report))


# submitted -> scheduled -> rescheduled* -> serviced, with query_cancelled
# allowed only after serviced (it annotates the stale assignee)
_NEXT = {
    None: {"query_submitted"},
    "query_submitted": {"query_scheduled"},
    "query_scheduled": {"query_rescheduled", "query_serviced"},
    "query_rescheduled": {"query_rescheduled", "query_serviced"},
    "query_serviced": {"query_cancelled"},
    "query_cancelled": {"query_cancelled"},
}
_LIFECYCLE = frozenset(k for k in _NEXT if k) | {"query_cancelled"}


def check_query_lifecycles(records: Iterable[TraceRecord]) -> list[str]:
    """Return a description of every per-query state machine violation."""
    state: dict[int, str | None] = {}
    problems = []
    for r in records:
        if r.ev not in _LIFECYCLE:
            continue
        qid = r.d["query_id"]
        cur = state.get(qid)
        if r.ev not in _NEXT[cur]:
            problems.append(f"query {qid}: {r.ev} after {cur} at t={r.t}")
        state[qid] = r.ev
    return problems
