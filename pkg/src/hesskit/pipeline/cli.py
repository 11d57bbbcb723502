"""Command-line entry point.

    hesskit <command> [--config PATH] [--seed N] [--mode fp32|fp16] [--n-v N]
                      [--target-compression F] [--out DIR]

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import (
    ConfigInvalid,
    HesskitError,
    InvalidSpec,
    MissingArtifact,
    UnknownCommand,
)
from ..report import canonical_json
from . import stages
from .config import PipelineConfig, build_config, load_config

COMMANDS = tuple(stages.STAGES)
VALIDATION_ERRORS = (ConfigInvalid, UnknownCommand, InvalidSpec, MissingArtifact)

log = logging.getLogger("hesskit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigInvalid("argv", message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hesskit", description="Hessian-aware pruning and INT8 quantization pipeline")
    p.add_argument("command", help=" | ".join(COMMANDS))
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--mode", choices=("fp32", "fp16"), help="Hutchinson precision mode")
    p.add_argument("--n-v", dest="n_v", type=int, help="Hutchinson iterations")
    p.add_argument("--target-compression", dest="target", type=float, help="retained-parameter fraction")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> PipelineConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides.update({f"seeds.{k}": args.seed for k in ("init", "data", "train", "hutchinson")})
    if args.mode is not None:
        overrides["hutchinson.mode"] = args.mode
    if args.n_v is not None:
        overrides["hutchinson.n_v"] = args.n_v
    if args.target is not None:
        overrides["pruning.target_compression"] = args.target
    if args.out is not None:
        overrides["output.dir"] = args.out
    if args.config is None and args.out is not None and (Path(args.out) / stages.CONFIG).is_file():
        # later stages reuse the configuration recorded by earlier ones
        base = stages.config_from_dir(args.out).to_dict()
        base.update(overrides)
        return build_config(base)
    return load_config(args.config, overrides)


def run(argv: list[str]) -> dict:
    if not argv or argv[0] not in COMMANDS and not argv[0].startswith("-"):
        raise UnknownCommand(f"unknown command {argv[0] if argv else ''!r}; expected one of {', '.join(COMMANDS)}")
    args = _parser().parse_args(argv)
    if args.command not in COMMANDS:
        raise UnknownCommand(f"unknown command {args.command!r}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report" and args.config is None and args.out is not None:
        return stages.run_report(stages.config_from_dir(args.out))
    cfg = resolve_config(args)
    if args.command != "report":
        stages.save_config(cfg)
    return stages.STAGES[args.command](cfg)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        result = run(argv)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except HesskitError as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(canonical_json(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
