# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Command-line entry point: ``othertales-darkpool <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml

from darkpool.configuration import PRESETS, ExperimentSpec, build_spec, deep_merge, load_config
from darkpool.errors import DarkPoolError
from darkpool.graph import SUBCOMMANDS, graph

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once; the level defaults to $LOG_LEVEL, then INFO."""
    name = (level or os.environ.get("LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(level=getattr(logging, name, logging.INFO), format=LOG_FORMAT)


def parse_assignment(text: str) -> Dict[str, Any]:
    """Turn ``a.b.c=value`` into ``{"a": {"b": {"c": value}}}``; values are parsed as YAML."""
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    parts = [part for part in key.strip().split(".") if part]
    if not parts:
        raise argparse.ArgumentTypeError(f"empty key in {text!r}")
    value: Any = yaml.safe_load(raw)
    for part in reversed(parts):
        value = {part: value}
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="othertales-darkpool",
        description="Liquidation with a lit venue and dark pools: solvers and experiments.",
    )
    parser.add_argument("subcommand", choices=sorted(SUBCOMMANDS))
    parser.add_argument("--config", type=Path, help="experiment YAML file (default $CONFIG_PATH)")
    parser.add_argument("--preset", choices=PRESETS, help="parameter preset")
    parser.add_argument(
        "--scenario", choices=["regulated-M1", "regulated-M2", "competitive"]
    )
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument(
        "--set",
        dest="assignments",
        action="append",
        type=parse_assignment,
        default=[],
        metavar="KEY=VALUE",
        help="override a parameter, e.g. --set market.rho=100 (repeatable)",
    )
    parser.add_argument("--fee-source", choices=["constant", "actor", "zero"])
    parser.add_argument("--checkpoint", type=Path, help="trained networks for --fee-source actor")
    parser.add_argument("--epochs", type=int, help="training epochs")
    parser.add_argument("--paths", type=int, help="Monte-Carlo paths")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    return parser


def resolve_spec(args: argparse.Namespace) -> ExperimentSpec:
    """Combine the experiment file, the preset and the command-line overrides."""
    cli_overrides: Dict[str, Any] = {}
    for assignment in args.assignments:
        cli_overrides = deep_merge(cli_overrides, assignment)
    if args.fee_source:
        cli_overrides = deep_merge(cli_overrides, {"sim": {"fee_source": args.fee_source}})
    if args.epochs is not None:
        cli_overrides = deep_merge(cli_overrides, {"train": {"epochs": args.epochs}})
    if args.paths is not None:
        cli_overrides = deep_merge(cli_overrides, {"sim": {"n_paths": args.paths}})

    config_path = args.config or os.environ.get("CONFIG_PATH")
    if config_path:
        base = load_config(config_path)
        preset = args.preset or base.preset
        overrides = deep_merge(base.overrides, cli_overrides)
        scenario = args.scenario or base.scenario
        seed = args.seed if args.seed is not None else base.seed
        out_dir = args.out or base.out_dir
    else:
        preset = args.preset or "table1"
        overrides = cli_overrides
        scenario, seed, out_dir = args.scenario, args.seed, args.out
    return build_spec(preset, overrides, scenario=scenario, seed=seed, out_dir=out_dir)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand through the experiment graph and return the exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        spec = resolve_spec(args)
    except DarkPoolError as exc:
        logger.error("Invalid configuration: %s", exc)
        return 2

    configurable: Dict[str, Any] = {}
    if args.checkpoint is not None:
        configurable["checkpoint_path"] = str(args.checkpoint)
    result = graph.invoke(
        {"subcommand": args.subcommand, "spec": spec},
        config={"configurable": configurable},
    )
    error = result.get("error")
    artifacts: List[str] = result.get("artifacts", [])
    if error:
        logger.error("%s failed: %s", args.subcommand, error)
        return 1
    logger.info("%s finished; artifacts in %s: %s", args.subcommand, spec.out_dir, artifacts)
    return 0


if __name__ == "__main__":
    sys.exit(main())
