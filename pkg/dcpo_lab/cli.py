"""Command-line entry point: `dcpo-lab <command>`."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, List, Optional

from .calibration import bin_records, summarize
from .errors import ConfigurationError, DivergenceError, FormatError, UsageError
from .harness import initial_policy, preset_names, run_experiment, run_preset
from .protocol import ExperimentSpec, RunConfig, SuiteSpec
from .storage import (
    dumps,
    load_records_csv,
    load_suite,
    read_json,
    save_policy,
    save_suite,
    write_csv,
    write_json,
    write_train_log,
)
from .taskenv import suite_from_spec
from .theory import certificates_passed, run_certificates
from .trainer import evaluate_policy, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

DEFAULT_RUN_DIR = "~/.dcpo-lab/runs"


def _seed_override() -> Optional[int]:
    raw = os.environ.get("DCPO_LAB_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"DCPO_LAB_SEED must be an integer, got {raw!r}") from None


def _emit(document: Any) -> None:
    sys.stdout.write(dumps(document))


def _reliability_rows(bins) -> List[List[Any]]:
    rows: List[List[Any]] = [["bin_lo", "bin_hi", "count", "mean_conf", "accuracy"]]
    for row in bins.to_rows():
        rows.append(
            [
                row["bin_lo"],
                row["bin_hi"],
                row["count"],
                "" if row["mean_conf"] is None else row["mean_conf"],
                "" if row["accuracy"] is None else row["accuracy"],
            ]
        )
    return rows


def cmd_train(args: argparse.Namespace) -> int:
    config = RunConfig.from_dict(read_json(args.config)) if args.config else RunConfig()
    seed = _seed_override()
    if seed is not None:
        config = RunConfig(config.suite, config.trainer.with_seed(seed), config.initial)
    out = Path(args.out)
    suite = suite_from_spec(config.suite)
    initial = initial_policy(suite, config.initial)
    params, log = train(config.trainer, suite, initial)
    evaluation = evaluate_policy(params, suite, config.trainer)

    write_json(out / "config.json", config.to_dict())
    save_suite(out / "suite.json", suite)
    write_train_log(out / "train_log.csv", log)
    save_policy(out / "policy.json", params)
    write_json(out / "metrics.json", evaluation.to_dict())
    if evaluation.bins is not None:
        write_csv(out / "bins.csv", _reliability_rows(evaluation.bins))
    _emit(evaluation.to_dict())
    return EXIT_OK


def cmd_theory(args: argparse.Namespace) -> int:
    seed = _seed_override()
    results = run_certificates(seed=args.seed if seed is None else seed, include_training=not args.skip_training)
    report = {name: result.to_dict() for name, result in results.items()}
    if args.out:
        write_json(Path(args.out) / "theory.json", report)
    _emit(report)
    return EXIT_OK if certificates_passed(results) else EXIT_FAILED


def cmd_metrics(args: argparse.Namespace) -> int:
    document = summarize(load_records_csv(args.input), args.bins)
    if args.out:
        write_json(Path(args.out), document)
    _emit(document)
    return EXIT_OK


def cmd_reliability(args: argparse.Namespace) -> int:
    rows = _reliability_rows(bin_records(load_records_csv(args.input), args.bins))
    if args.out:
        write_csv(Path(args.out), rows)
    else:
        for row in rows:
            sys.stdout.write(",".join(str(cell) for cell in row) + "\n")
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    if bool(args.preset) == bool(args.config):
        raise UsageError("give exactly one of --preset or --config")
    seed = _seed_override()
    if args.preset:
        document, ok = run_preset(args.preset, args.out, args.base_seed if seed is None else seed, args.workers)
    else:
        spec = ExperimentSpec.from_dict(read_json(args.config)).with_output_dir(args.out)
        if seed is not None:
            spec = spec.with_base_seed(seed)
        document, ok = run_experiment(spec, max_workers=args.workers), True
    _emit(document)
    return EXIT_OK if ok else EXIT_FAILED


def cmd_suite(args: argparse.Namespace) -> int:
    spec = SuiteSpec.from_dict(read_json(args.config)) if args.config else SuiteSpec()
    suite = suite_from_spec(spec)
    save_suite(Path(args.out), suite)
    if args.check and load_suite(Path(args.out)).to_dict() != suite.to_dict():
        logger.error("suite reloaded from %s differs from the generated one", args.out)
        return EXIT_FAILED
    _emit({"tasks": len(suite), "seed": suite.seed, "path": str(args.out)})
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import asyncio

    from .server import LabServer
    from .storage import RunStorage

    asyncio.run(LabServer(RunStorage(Path(args.run_dir))).run())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcpo-lab", description="Desk-scale RLVR calibration lab.")
    parser.add_argument(
        "--log-level",
        default=os.environ.get("DCPO_LAB_LOG_LEVEL", "WARNING"),
        help="logging level (default from DCPO_LAB_LOG_LEVEL, else WARNING)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one policy")
    p.add_argument("--config", type=Path, help="run config JSON")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("theory", help="run the theory certificates")
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-training", action="store_true", help="skip the training-based certificates")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("metrics", help="calibration metrics of a confidence,correct CSV")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("reliability", help="reliability-diagram bins of a confidence,correct CSV")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_reliability)

    p = sub.add_parser("experiment", help="run an experiment preset or spec")
    p.add_argument("--preset", choices=preset_names())
    p.add_argument("--config", type=Path, help="experiment spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("suite", help="generate a task suite JSON")
    p.add_argument("--config", type=Path, help="suite spec JSON")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--check", action="store_true", help="reload the written suite and compare")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("serve", help="run the MCP tool server on stdio")
    p.add_argument("--run-dir", default=os.environ.get("DCPO_LAB_RUN_DIR", DEFAULT_RUN_DIR))
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, FormatError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"dcpo-lab: error: {exc}\n")
        return EXIT_USAGE
    except DivergenceError as exc:
        sys.stderr.write(f"dcpo-lab: diverged: {exc}\n")
        return EXIT_FAILED
    except OSError as exc:
        sys.stderr.write(f"dcpo-lab: {exc}\n")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
