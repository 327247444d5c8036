"""Command-line driver: ``run``, ``replay-check`` and ``validate``.

Exit status: 0 success, 1 runtime or I/O error, 2 validation failure.
Bundled corpus scenarios can be named without a path (``conscientia run baseline``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from .errors import ParseError, SimulationError
from .runtime import Simulation
from .scenario import Scenario, load_scenario, validate_scenario
from .trace import serialize_trace, summarize, write_outputs

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

log = logging.getLogger("conscientia")

# (scenario, seed) -> simulation; tests swap this to inject nondeterminism
SimFactory = Callable[[Scenario, "int | None"], Simulation]


def _default_factory(sc: Scenario, seed: int | None) -> Simulation:
    return Simulation(sc, seed=seed)


def corpus_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("conscientia.scenarios").iterdir()
                  if p.name.endswith(".yaml"))


def resolve(path: str) -> Path:
    p = Path(path)
    if not p.exists() and path in corpus_names():
        with resources.as_file(resources.files("conscientia.scenarios") / f"{path}.yaml") as f:
            return f
    return p


def _load(path: str) -> tuple[Scenario | None, int]:
    """Parse and validate; prints diagnostics and returns an exit code on failure."""
    try:
        sc = load_scenario(resolve(path))
    except OSError as exc:
        print(f"error: IoError: {exc}", file=sys.stderr)
        return None, EXIT_RUNTIME
    except ParseError as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return None, EXIT_INVALID
    problems = validate_scenario(sc)
    if problems:
        for msg in problems:
            print(f"invalid: {msg}", file=sys.stderr)
        return None, EXIT_INVALID
    return sc, EXIT_OK


def cmd_validate(scenario_path: str) -> int:
    sc, code = _load(scenario_path)
    if sc is not None:
        print(f"ok: {sc.name}")
    return code


def cmd_run(scenario_path: str, seed_override: int | None = None, until: int | None = None,
            trace_out: str | None = None, metrics_out: str | None = None, *,
            quiet: bool = False, factory: SimFactory = _default_factory) -> int:
    sc, code = _load(scenario_path)
    if sc is None:
        return code
    src = Path(scenario_path)
    # bundled scenarios named without a path write into the working directory
    base = src.parent if src.exists() else Path.cwd()
    stem = src.stem if src.suffix in (".yaml", ".yml") else src.name
    trace_out = trace_out or str(base / f"{stem}.trace.jsonl")
    metrics_out = metrics_out or str(base / f"{stem}.metrics.csv")
    try:
        records = factory(sc, seed_override).run(until)
        report = summarize(records)
        write_outputs(records, report, trace_out, metrics_out)
    except OSError as exc:
        print(f"error: IoError: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SimulationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not quiet:
        print(report.summary_text(), end="")
    log.info("trace written to %s, metrics to %s", trace_out, metrics_out)
    return EXIT_OK


def cmd_replay_check(scenario_path: str, seed: int | None = None, n_runs: int = 3, *,
                     factory: SimFactory = _default_factory) -> int:
    if n_runs < 2:
        raise ValueError("n_runs must be at least 2")
    sc, code = _load(scenario_path)
    if sc is None:
        return code
    try:
        traces = [serialize_trace(factory(sc, seed).run()) for _ in range(n_runs)]
    except SimulationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    first = traces[0].splitlines()
    for i, other in enumerate(traces[1:], start=2):
        if other == traces[0]:
            continue
        lines = other.splitlines()
        for n in range(max(len(first), len(lines))):
            a = first[n] if n < len(first) else "<end of trace>"
            b = lines[n] if n < len(lines) else "<end of trace>"
            if a != b:
                print(f"divergence between run 1 and run {i} at line {n + 1}:")
                print(f"  run 1: {a}")
                print(f"  run {i}: {b}")
                return EXIT_RUNTIME
    print(f"ok: {n_runs} runs, {len(first)} identical lines")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conscientia", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write trace + metrics")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--until", type=int, metavar="MS", help="stop at this virtual time")
    run.add_argument("--trace", metavar="PATH")
    run.add_argument("--metrics", metavar="PATH")
    run.add_argument("--quiet", action="store_true", help="suppress the summary")

    rc = sub.add_parser("replay-check", help="run n times and compare trace bytes")
    rc.add_argument("scenario")
    rc.add_argument("--seed", type=int)
    rc.add_argument("-n", "--runs", type=int, default=3)

    val = sub.add_parser("validate", help="parse and validate only")
    val.add_argument("scenario")

    sub.add_parser("list", help="list bundled corpus scenarios")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "run":
        return cmd_run(args.scenario, args.seed, args.until, args.trace, args.metrics,
                       quiet=args.quiet)
    if args.command == "replay-check":
        if args.runs < 2:
            parser.error("--runs must be at least 2")
        return cmd_replay_check(args.scenario, args.seed, args.runs)
    if args.command == "validate":
        return cmd_validate(args.scenario)
    print("\n".join(corpus_names()))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
