"""Deterministic discrete-event core.

Time is an integer count of simulated milliseconds. Events are ordered by
``(at, seq)`` where ``seq`` is a global counter assigned at scheduling time,
so ties are always broken the same way. All randomness comes from one
seeded :class:`Rng`.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable

from .errors import OverlappingSets, SchedulingInPast, UnknownPeer
from .trace import KERNEL, Tracer

LINK_CLASSES = ("intra_subgroup", "inter_subgroup", "inter_network")


@dataclass(order=True, frozen=True)
class Event:
    at: int
    seq: int
    target: Any = field(compare=False)
    payload: Any = field(compare=False)


@dataclass(frozen=True)
class Delivery:
    """Payload of a message delivery event."""

    src: int
    msg: Any


class Rng:
    """Seeded integer random stream with a draw counter."""

    def __init__(self, seed: int) -> None:
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self.position = 0
        self._r = random.Random(seed)

    def randint(self, lo: int, hi: int) -> int:
        self.position += 1
        return self._r.randint(lo, hi)

    def chance(self, p: Fraction) -> bool:
        """True with probability ``p``; no draw is made when p is 0 or 1."""
        if p <= 0:
            return False
        if p >= 1:
            return True
        self.position += 1
        return self._r.randrange(p.denominator) < p.numerator


@dataclass
class NetworkModel:
    # network name -> link class -> base latency in ms
    latencies: dict[str, dict[str, int]] = field(default_factory=dict)
    loss_prob: Fraction = Fraction(0)
    jitter_max: int = 0
    partitions: list[frozenset[int]] = field(default_factory=list)
    default_latency: dict[str, int] = field(
        default_factory=lambda: {"intra_subgroup": 2, "inter_subgroup": 5, "inter_network": 20}
    )

    def base_latency(self, src_net: str, dst_net: str, link: str) -> int:
        if link == "inter_network":
            return max(self.latencies.get(src_net, self.default_latency)["inter_network"],
                       self.latencies.get(dst_net, self.default_latency)["inter_network"])
        return self.latencies.get(src_net, self.default_latency)[link]

    def component(self, peer: int) -> int:
        for i, group in enumerate(self.partitions):
            if peer in group:
                return i
        # unlisted peers share one implicit component
        return -1

    def connected(self, a: int, b: int) -> bool:
        return self.component(a) == self.component(b)


class Kernel:
    """Virtual clock, event queue and simulated transport."""

    def __init__(self, seed: int = 0, network: NetworkModel | None = None,
                 tracer: Tracer | None = None) -> None:
        self.now = 0
        self.rng = Rng(seed)
        self.network = network or NetworkModel()
        self.tracer = tracer or Tracer()
        self.handler: Callable[[Event], None] | None = None
        self.link_class: Callable[[int, int], str] | None = None
        self.peers: dict[int, str] = {}
        self.down: set[int] = set()
        self.messages_sent = 0
        self._queue: list[Event] = []
        self._seq = 0

    def add_peer(self, peer: int, network: str = "default") -> None:
        self.peers[peer] = network

    def schedule_event(self, at: int, target: Any, payload: Any) -> int:
        if at < self.now:
            raise SchedulingInPast(f"event at {at} scheduled when now={self.now}")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, Event(at, seq, target, payload))
        return seq

    def after(self, delay: int, target: Any, payload: Any) -> int:
        return self.schedule_event(self.now + delay, target, payload)

    def pending(self) -> int:
        return len(self._queue)

    def run_until(self, t_end: int) -> int:
        processed = 0
        while self._queue and self._queue[0].at <= t_end:
            ev = heapq.heappop(self._queue)
            self.now = ev.at
            processed += 1
            if self.handler is not None:
                self.handler(ev)
        return processed

    def _link(self, src: int, dst: int) -> str:
        if self.peers[src] != self.peers[dst]:
            return "inter_network"
        if self.link_class is not None:
            return self.link_class(src, dst)
        return "inter_subgroup"

    def latency(self, src: int, dst: int) -> int:
        if src == dst:
            return 0
        base = self.network.base_latency(self.peers[src], self.peers[dst], self._link(src, dst))
        jitter = self.rng.randint(0, self.network.jitter_max) if self.network.jitter_max else 0
        return base + jitter

    def send_message(self, src: int, dst: int, payload: Any) -> bool:
        """Schedule delivery of ``payload`` or drop it. Returns True if scheduled."""
        if src not in self.peers:
            raise UnknownPeer(src)
        if dst not in self.peers:
            raise UnknownPeer(dst)
        self.messages_sent += 1
        kind = type(payload).__name__
        if src != dst:
            if not self.network.connected(src, dst):
                self.tracer.emit(self.now, "msg_dropped", KERNEL, reason="partition",
                                 kind=kind, src=src, dst=dst)
                return False
            if self.rng.chance(self.network.loss_prob):
                self.tracer.emit(self.now, "msg_dropped", KERNEL, reason="loss",
                                 kind=kind, src=src, dst=dst)
                return False
        self.schedule_event(self.now + self.latency(src, dst), dst, Delivery(src, payload))
        return True

    def set_partition(self, groups: Iterable[Iterable[int]]) -> None:
        sets = [frozenset(g) for g in groups]
        seen: set[int] = set()
        for s in sets:
            if seen & s:
                raise OverlappingSets(sorted(seen & s))
            seen |= s
        self.network.partitions = sets
