"""Command line entry point: run scenarios, print reports, validate exported chains."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from vecsim.chainfile import FormatError, validate_chain_file
from vecsim.network import OracleMode
from vecsim.scenario import ConfigError, load_scenario, run_scenario

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVALID = 2

SEED_ENV = "VECSIM_SEED"

log = logging.getLogger("vecsim")

_MODE_NAMES = {
    "traditional": OracleMode.TRADITIONAL_ORACLE,
    "all-nodes": OracleMode.ALL_NODES_CALL,
    "vec": OracleMode.VERIFIABLE_EXTERNAL_CALLS,
}
for _m in OracleMode:
    _MODE_NAMES[_m.value] = _m


def _mode(value: str) -> OracleMode:
    try:
        return _MODE_NAMES[value.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown mode {value!r}; choose from {', '.join(sorted(_MODE_NAMES))}") from None


def _seed_default() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw, 0)
    except ValueError:
        raise ConfigError(SEED_ENV, f"expected an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vecsim",
        description="Simulate a proof-of-work chain whose contracts make verifiable external calls.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("scenario", type=Path, help="scenario YAML file")
        p.add_argument("--mode", type=_mode, help="override the scenario's oracle mode")
        p.add_argument("--seed", type=int, help=f"override the global seed (default: ${SEED_ENV} or the file)")

    run = sub.add_parser("run", help="run a scenario and print its report")
    scenario_args(run)
    run.add_argument("--export", type=Path, metavar="PATH", help="write the final chain to PATH")
    run.add_argument("--trace", type=Path, metavar="PATH", help="write the event trace to PATH")
    run.add_argument("--format", choices=("text", "json-lines"), default="text")

    report = sub.add_parser("report", help="run a scenario and print only the metrics report")
    scenario_args(report)
    report.add_argument("--format", choices=("text", "json-lines"), default="text")

    validate = sub.add_parser("validate", help="replay an exported chain without contacting any oracle")
    validate.add_argument("chain_file", type=Path)
    return parser


def _render(report, fmt: str) -> str:
    return report.to_json_lines() if fmt == "json-lines" else report.to_text()


def _run(args) -> int:
    scenario = load_scenario(args.scenario)
    seed = args.seed if args.seed is not None else _seed_default()
    scenario = scenario.with_overrides(mode=args.mode, seed=seed)
    log.info("running %s in mode %s", args.scenario, scenario.mode.value)
    result = run_scenario(scenario)
    if getattr(args, "export", None) is not None:
        args.export.write_text(result.chain_text, encoding="utf-8")
        log.info("exported %d blocks to %s", result.chain.height, args.export)
    if getattr(args, "trace", None) is not None:
        args.trace.write_text(result.world.trace_text(), encoding="utf-8")
    sys.stdout.write(_render(result.report, args.format))
    return EXIT_OK if result.report.chain_valid else EXIT_INVALID


def _validate(args) -> int:
    try:
        ok = validate_chain_file(args.chain_file)
    except FormatError as exc:
        print(f"vecsim: {args.chain_file}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print("valid" if ok else "invalid")
    return EXIT_OK if ok else EXIT_INVALID


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "validate":
            return _validate(args)
        return _run(args)
    except ConfigError as exc:
        print(f"vecsim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"vecsim: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
