"""Command-line entry points: ``mlenv train|test|tune|replay``.

Note that ``--optimizer`` means different things per command: under ``train``
and ``test`` the parameter update rule is ``--method_optimizer``, while under
``tune`` ``--optimizer`` picks the search strategy ("Grid Search" or
"Random Search").
"""

from __future__ import annotations

import json
import sys
from typing import Sequence

from mlenv.config import COMMANDS, CLIError, parse_cli
from mlenv.experiment import StageError, cmd_test, cmd_train, replay
from mlenv.hpo import cmd_tune

USAGE = f"usage: mlenv {{{','.join((*COMMANDS, 'replay'))}}} [flags...]  (mlenv <command> --help for flags)"


def _print_metrics(values: dict[str, float]) -> None:
    print(json.dumps(values, indent=2, sort_keys=True))


def run(command: str, argv: Sequence[str]) -> int:
    if command == "replay":
        if len(argv) not in (1, 3) or (len(argv) == 3 and argv[1] != "--save_path"):
            raise CLIError("usage: mlenv replay <run_dir or config.json> [--save_path DIR]")
        result = replay(argv[0], argv[2] if len(argv) == 3 else None)
        print(f"run directory: {result.run_dir}")
        _print_metrics(result.test.values)
        return 0
    cfg = parse_cli(argv, command)
    if command == "train":
        result = cmd_train(cfg)
        print(f"run directory: {result.run_dir}")
        _print_metrics(result.test.values)
    elif command == "test":
        result = cmd_test(cfg)
        print(f"run directory: {result.run_dir}")
        _print_metrics(result.test.values)
    else:
        result = cmd_tune(cfg)
        best = result.best
        print(f"tuning directory: {result.run_dir}")
        print(f"best trial {best.trial_id}: {cfg.args['optimization_metric']} = {best.objective!r}")
        for flag, value in sorted(best.assignment.items()):
            print(f"  --{flag} {value}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        return 0 if argv else 2
    command, rest = argv[0], argv[1:]
    if command not in (*COMMANDS, "replay"):
        print(f"mlenv: unknown command {command!r}\n{USAGE}", file=sys.stderr)
        return 2
    try:
        return run(command, rest)
    except CLIError as exc:
        print(f"mlenv {command}: argument parsing failed: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"mlenv {command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"mlenv {command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def train_main() -> int:
    return main(["train", *sys.argv[1:]])


def test_main() -> int:
    return main(["test", *sys.argv[1:]])


def tune_main() -> int:
    return main(["tune", *sys.argv[1:]])
