"""
Command-line entry point.

    python -m trans_action.main generate --output-dir runs/demo --seed 7
    python -m trans_action.main train --features runs/demo/data/features.tact \
        --annotations runs/demo/data/annotations.csv --output-dir runs/demo
    python -m trans_action.main evaluate --checkpoints runs/demo/checkpoints/final.ckpt ...
    python -m trans_action.main gradcheck
    python -m trans_action.main ablate --features ... --annotations ...

Every RunConfig field is a long flag (`n_blocks` -> `--n-blocks`). Values come
from the defaults, then `--config FILE` (`key = value` lines), then flags.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from trans_action import commands
from trans_action.exceptions import NumericError, ShapeError, TransActionError, UsageError
from trans_action.logger import attach_run_log, detach_run_log, logger
from trans_action.models.tensor import set_debug
from trans_action.utils.config import RunConfig, config, echo_config, read_config_file, resolve_run_config

SUBCOMMANDS = {
    "generate": "emit a synthetic dataset",
    "train": "train a model and write checkpoints plus a metrics log",
    "evaluate": "ensemble checkpoints and report mean top-k recall",
    "gradcheck": "compare tape gradients with finite differences at 64-bit",
    "ablate": "train and evaluate the ablation grid",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_text(field) -> str:
    if field.default_factory is not None:
        return "empty"
    return "unset" if field.default is None else str(field.default)


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", help="key = value file; flags override it")
    for name, field in RunConfig.model_fields.items():
        shared.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None,
                            help=f"default: {_default_text(field)}")

    parser = _Parser(prog="trans_action", description="Hierarchical attention for action anticipation")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, summary in SUBCOMMANDS.items():
        subparsers.add_parser(name, parents=[shared], help=summary, description=summary)
    return parser


def parse_run_config(argv: List[str]):
    args = build_parser().parse_args(argv)
    values = vars(args)
    command = values.pop("command")
    config_file = values.pop("config")
    file_values = read_config_file(config_file) if config_file else {}
    return command, resolve_run_config(file_values, values)


def run(command: str, run_config: RunConfig) -> int:
    output_dir = Path(run_config.output_dir)
    echo_config(run_config, output_dir)
    set_debug(run_config.debug or config.DEBUG)
    handler = attach_run_log(output_dir)
    try:
        logger.info(f"Running '{command}' with output directory {output_dir}")
        if command == "generate":
            commands.generate(run_config)
        elif command == "train":
            commands.train_command(run_config)
        elif command == "evaluate":
            commands.evaluate_command(run_config)
        elif command == "gradcheck":
            if not commands.gradcheck_command(run_config):
                raise NumericError("gradient check failed: at least one operation exceeds the tolerance")
        elif command == "ablate":
            commands.ablate_command(run_config)
        return 0
    finally:
        detach_run_log(handler)


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, run_config = parse_run_config(argv)
        return run(command, run_config)
    except TransActionError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (ShapeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
