from __future__ import annotations

import functools
from importlib import resources

import pytest

from conscientia.kernel import Rng
from conscientia.runtime import Simulation
from conscientia.scenario import Params, load_scenario
from conscientia.trace import Tracer

CORPUS = ("baseline", "worker-kill", "rv-kill", "partition-merge-split",
          "capacity-split", "saturation-decay")


def corpus_path(name: str) -> str:
    return str(resources.files("conscientia.scenarios") / f"{name}.yaml")


@functools.lru_cache(maxsize=None)
def corpus_run(name: str):
    """Run a corpus scenario once per session with invariant checks on."""
    sim = Simulation(load_scenario(corpus_path(name)), check_invariants=True)
    records = sim.run()
    return sim, records


class StubSim:
    """Just enough of Simulation for exercising one service in isolation."""

    def __init__(self, now: int = 0, **params) -> None:
        self.now = now
        self.params = Params(**params)
        self.tracer = Tracer()
        self.rng = Rng(1)
        self.sent: list[tuple[int, int, object]] = []
        self.timers: list[tuple[int, int, str, object]] = []

    def emit(self, ev, actor, **d):
        return self.tracer.emit(self.now, ev, actor, **d)

    def send(self, src, dst, msg):
        self.sent.append((src, dst, msg))
        return True

    def timer(self, delay, peer, name, arg=None):
        self.timers.append((self.now + delay, peer, name, arg))

    def events(self, kind):
        return [r for r in self.tracer.records if r.ev == kind]

    def messages(self, cls):
        return [(s, d, m) for s, d, m in self.sent if isinstance(m, cls)]


@pytest.fixture
def stub():
    return StubSim()


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
