# Copyright 2025 shape-turnpike contributors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Command line entry point: ``tsl <command> --config FILE [--out DIR] [--threads N]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from pydantic import ValidationError

from shape_turnpike.logging_helper import get_logger, log_error_details
from shape_turnpike.presets import PRESETS
from shape_turnpike.scenario import (
    EXIT_CONFIG,
    EXIT_GAP,
    EXIT_OK,
    EXIT_SOLVER,
    run_classify,
    run_report,
    run_scenario,
    run_spectral,
    run_static_only,
    sweep_T,
)
from shape_turnpike.schema import ConfigError, RunConfig
from shape_turnpike.settings import get_settings

logger = get_logger()


def config_from_dict(raw: dict[str, Any], source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        lines = [
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
            for err in e.errors()
        ]
        raise ConfigError(f"{source}: invalid configuration\n" + "\n".join(lines)) from e


def parse_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: no such file") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return config_from_dict(raw, source=str(path))


def _solve_static(config: RunConfig, out: Path, threads: int, base: Path | None) -> int:
    return run_static_only(config, out, base).exit_code


def _solve_dynamic(config: RunConfig, out: Path, threads: int, base: Path | None) -> int:
    return run_scenario(config, out, base).exit_code


def _sweep(config: RunConfig, out: Path, threads: int, base: Path | None) -> int:
    if config.T_list is None:
        raise ConfigError("T_list: required by the sweep command")
    return sweep_T(config, out, threads, base).exit_code


def _classify(config: RunConfig, out: Path, threads: int, base: Path | None) -> int:
    diagnosis = run_classify(config, out, base)
    logger.info(f"Classification: {diagnosis.case.value} ({diagnosis.message})")
    return EXIT_OK


def _spectral(config: RunConfig, out: Path, threads: int, base: Path | None) -> int:
    prediction = run_spectral(config, out, base)
    logger.info(
        f"Spectral prediction: lambda={prediction.lambda_:.6g} mu={prediction.mu:.6g} "
        f"rate={prediction.rate:.6g}"
    )
    return EXIT_OK


def _report(config: RunConfig, out: Path, threads: int, base: Path | None) -> int:
    entries = run_report(config, out, base)
    return EXIT_OK if all(e.certified for e in entries) else EXIT_GAP


COMMANDS: dict[str, Callable[[RunConfig, Path, int, Path | None], int]] = {
    "solve-static": _solve_static,
    "solve-dynamic": _solve_dynamic,
    "sweep": _sweep,
    "classify": _classify,
    "spectral": _spectral,
    "report": _report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsl", description="Turnpike experiments for parabolic shape optimization"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        source = cmd.add_mutually_exclusive_group(required=True)
        source.add_argument("--config", type=Path, help="JSON experiment card")
        source.add_argument("--preset", choices=sorted(PRESETS), help="Built-in experiment card")
        cmd.add_argument("--out", type=Path, default=None, help="Output directory")
        cmd.add_argument("--threads", type=int, default=None, help="Parallel horizons in a sweep")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    context = {"command": args.command, "config": args.config, "preset": args.preset}
    try:
        if args.preset is not None:
            config = config_from_dict(PRESETS[args.preset], source=f"preset {args.preset}")
            base_dir = None
        else:
            config = parse_config(args.config)
            base_dir = args.config.parent
        threads = args.threads if args.threads is not None else get_settings().threads
        if threads < 1:
            raise ConfigError("threads: must be >= 1")
        out = args.out if args.out is not None else config.output_dir
        return COMMANDS[args.command](config, out, threads, base_dir)
    except ConfigError as e:
        log_error_details(e, context)
        return EXIT_CONFIG
    except Exception as e:
        log_error_details(e, context)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
