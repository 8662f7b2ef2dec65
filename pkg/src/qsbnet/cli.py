"""Command-line entry point.

Exit codes: 0 success, 1 a verification suite failed, 2 configuration error,
3 invariant violation, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .config import Scenario, load_scenario_file
from .errors import ConfigError, InvariantViolation
from .ledger import dump_ledger
from .metrics import dumps_metrics
from .simulation import Simulation

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_IO = 4
OUT_DIR_ENV = "QSB_OUT_DIR"


def example_scenario_path() -> Path:
    return Path(str(resources.files("qsbnet") / "scenarios" / "six_node.json"))


@dataclass(frozen=True)
class RunSpec:
    config_path: Path
    seeds: tuple[int, ...]
    out_dir: Path
    emit_trace: bool = False
    verify_suite: str | None = None
    quiet: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("--seeds", "seed range is empty")


@dataclass(frozen=True)
class SeedOutputs:
    seed: int
    metrics: Path
    ledger: Path
    trace: Path | None
    blocking: float


def parse_seeds(text: str) -> tuple[int, ...]:
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            a, b = int(lo), int(hi)
            if b < a:
                raise ValueError
            return tuple(range(a, b + 1))
        return (int(text),)
    except ValueError:
        raise ConfigError("--seeds", f"expected A..B with A <= B, got {text!r}") from None


def ledger_dump_text(sim: Simulation) -> str:
    parts = []
    for m in sim.state.validators:
        parts.append(f"# node {m}\n")
        parts.append(dump_ledger(sim.state.cluster.nodes[m].ledger))
    return "".join(parts)


def run_seed(scenario: Scenario, seed: int, out_dir: Path, emit_trace: bool) -> SeedOutputs:
    """One isolated run; writes metrics, ledger dump and (optionally) the event trace."""
    sim = Simulation(scenario, seed, trace=emit_trace)
    report = sim.run()
    metrics_text = dumps_metrics(report)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / f"metrics-seed{seed}.json"
    ledger_path = out_dir / f"ledger-seed{seed}.tsv"
    metrics_path.write_text(metrics_text)
    ledger_path.write_text(ledger_dump_text(sim))
    trace_path = None
    if emit_trace:
        trace_path = out_dir / f"trace-seed{seed}.csv"
        trace_path.write_text(sim.trace_csv())
    return SeedOutputs(seed, metrics_path, ledger_path, trace_path, report["blocking"]["probability"])


def _run_seed_job(args):
    config_path, seed, out_dir, emit_trace = args
    return run_seed(load_scenario_file(config_path), seed, out_dir, emit_trace)


def run_scenario(spec: RunSpec) -> int:
    scenario = load_scenario_file(spec.config_path)
    if spec.workers > 1 and len(spec.seeds) > 1:
        jobs = [(spec.config_path, s, spec.out_dir, spec.emit_trace) for s in spec.seeds]
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            outputs = list(pool.map(_run_seed_job, jobs))
    else:
        outputs = [run_seed(scenario, s, spec.out_dir, spec.emit_trace) for s in spec.seeds]
    if not spec.quiet:
        for out in outputs:
            print(f"seed {out.seed}: blocking={out.blocking:.6f} metrics={out.metrics}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsbnet", description="Quantum-secured blockchain optical network simulator")
    p.add_argument("--config", type=Path, help="scenario JSON document (default: bundled six-node example)")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="single seed (default: the scenario's sim.seed)")
    seeds.add_argument("--seeds", help="inclusive seed range A..B")
    p.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_DIR_ENV} or ./out)")
    p.add_argument("--trace", action="store_true", help="also write a per-event CSV trace")
    p.add_argument("--verify", metavar="SUITE", help="run a built-in verification suite instead of a scenario")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes for seed sweeps")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = args.config or example_scenario_path()
        out_dir = args.out or Path(os.environ.get(OUT_DIR_ENV) or "out")
        if args.verify:
            from .verify import run_suite

            ok = run_suite(args.verify, config_path=config, quiet=args.quiet)
            return EXIT_OK if ok else EXIT_VERIFY_FAILED
        if args.seeds is not None:
            seeds = parse_seeds(args.seeds)
        elif args.seed is not None:
            seeds = (args.seed,)
        else:
            seeds = (load_scenario_file(config).sim.seed,)
        spec = RunSpec(config, seeds, out_dir, args.trace, None, args.quiet, max(1, args.workers))
        return run_scenario(spec)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
