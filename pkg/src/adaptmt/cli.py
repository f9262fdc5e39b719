"""Command line entry point: ``adaptmt run|report|compare|replay|demo``."""
from __future__ import annotations

import argparse
import dataclasses
import difflib
import json
import logging
import os
import sys
import tempfile
import time

from .bandit import SnapshotError
from .campaign import MODES, CampaignConfig, ConfigError, run
from .report import ReportError, compare, load_logs, report_from_files, write_report
from .suts import SutError

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_SUT = 3


def _config_from_args(args, mode: str) -> CampaignConfig:
    config = CampaignConfig.load(args.config)
    changes = {"mode": mode}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.iterations is not None:
        changes["iterations"] = args.iterations
    if args.out_dir:
        out_dir = os.path.abspath(args.out_dir)
        changes["log"] = os.path.join(out_dir, f"{mode}.jsonl")
        changes["baseline_table"] = os.path.join(out_dir, "baseline.csv")
        changes["snapshot_out"] = os.path.join(out_dir, f"{mode}_state.json")
    if args.snapshot_in:
        changes["snapshot_in"] = os.path.abspath(args.snapshot_in)
    if args.snapshot_out:
        changes["snapshot_out"] = os.path.abspath(args.snapshot_out)
    if mode not in ("amt", "boundary"):
        changes["snapshot_out"] = None
    try:
        return dataclasses.replace(config, **changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def cmd_run(args) -> int:
    try:
        config = _config_from_args(args, args.mode)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    started = time.perf_counter()
    try:
        result = run(config)
    except (ConfigError, SnapshotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SUT
    elapsed = time.perf_counter() - started
    if config.mode == "baseline":
        executions = sum(n for cells in result.baseline.values() for _, n in cells.values())
        violations = sum(v for cells in result.baseline.values() for v, _ in cells.values())
        rate = violations / executions if executions else 0.0
        print(f"baseline: {executions} executions, violation rate {rate:.4f}, "
              f"{result.failures} failures, {elapsed:.2f} s"
              + (f", table {config.baseline_table}" if config.baseline_table else ""))
        return EXIT_OK
    n = len(result.records)
    failures = sum(r["failed"] for r in result.records)
    print(f"{config.mode}: {n} iterations, violation rate {result.violation_rate:.4f}, "
          f"{failures} failures, {1e3 * elapsed / n:.3f} ms/iteration "
          f"({1e3 * result.overhead_per_iteration:.3f} ms outside the SUT)"
          + (f", log {config.log}" if config.log else ""))
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = report_from_files(args.logs, args.baseline)
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    paths = write_report(report, args.out_dir)
    groups = report["summary"]["groups"]
    parts = [f"{g} {s['violation_rate']:.4f}" for g, s in groups.items() if s["violation_rate"] is not None]
    print("report: violation rate " + ", ".join(parts) + f"; wrote {', '.join(paths.values())}")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        summary = compare(load_logs([args.amt_log]), load_logs([args.random_log]))
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-derive a log from config and seed, then diff it against ``--log``."""
    try:
        config = CampaignConfig.load(args.config)
        if (args.mode or config.mode) == "baseline":
            raise ConfigError("replay works on log-producing modes (amt, random, boundary)")
        with tempfile.TemporaryDirectory(prefix="adaptmt-replay-") as tmp:
            replay_log = os.path.join(tmp, "replay.jsonl")
            config = config.with_overrides(mode=args.mode, seed=args.seed,
                                           iterations=args.iterations, log=replay_log)
            config = dataclasses.replace(config, snapshot_out=None, baseline_table=None)
            run(config)
            with open(replay_log) as fh:
                fresh = fh.readlines()
    except (ConfigError, SnapshotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SUT
    target = args.log or CampaignConfig.load(args.config).log
    try:
        with open(target) as fh:
            recorded = fh.readlines()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if fresh == recorded:
        print(f"replay: {len(fresh)} records identical")
        return EXIT_OK
    diff = list(difflib.unified_diff(recorded, fresh, "recorded", "replayed", n=0))
    sys.stdout.writelines(diff[:20])
    print(f"replay: logs differ ({len(recorded)} recorded vs {len(fresh)} replayed records)")
    return EXIT_FAILED


def cmd_demo(args) -> int:
    from .synth import write_demo
    configs = write_demo(args.directory, sources=args.sources, iterations=args.iterations, seed=args.seed)
    for name, path in configs.items():
        print(f"{name}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptmt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a campaign")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--snapshot-in")
    p.add_argument("--snapshot-out")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="fold campaign logs into report tables")
    p.add_argument("logs", nargs="+")
    p.add_argument("--baseline", help="baseline table CSV from 'run baseline'")
    p.add_argument("--out-dir", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="compare an amt log with a random log")
    p.add_argument("amt_log")
    p.add_argument("random_log")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("replay", help="re-run a config and diff against its log")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--mode", choices=("amt", "random", "boundary"), help="override the config's mode")
    p.add_argument("--log", help="log to compare against (default: the config's log)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("demo", help="write a synthetic suite, oracle specs and configs")
    p.add_argument("directory")
    p.add_argument("--sources", type=int, default=100)
    p.add_argument("--iterations", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
