"""Two-phase command-line parsing into a serializable `RunConfig`.

Phase 1 reads the component-selection flags (``--datamodule``, ``--model``,
``--method``, ``--loss``, ``--regularizer``). Phase 2 builds a parser holding
the top-level flags plus whatever prefixed flags each selected component adds
through its ``add_argparse_args`` classmethod, and parses the whole command
line against it, so unknown flags are rejected.
"""

from __future__ import annotations

import argparse
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Sequence

from mlenv import __version__
from mlenv.data import TaskKind
from mlenv.methods import LOSSES
from mlenv.registry import REGISTRY, Registry, RegistryError

COMMANDS = ("train", "test", "tune")
GROUPS = ("datamodule", "model", "method", "trainer")
TUNERS = ("Grid Search", "Random Search")
DATA_ROOT_ENV = "MLENV_DATA_ROOT"


class CLIError(ValueError):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Raises `CLIError` instead of printing usage and exiting."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise CLIError(f"{self.prog}: {message}")


class PrefixedGroup:
    """Argument group that only accepts flags starting with ``--<prefix>_``."""

    def __init__(self, parser: argparse.ArgumentParser, prefix: str, owner: str):
        self.prefix = prefix
        self.owner = owner
        self._group = parser.add_argument_group(f"{prefix} ({owner})")

    def add_argument(self, *names: str, **kwargs):
        for name in names:
            if not name.startswith(f"--{self.prefix}_"):
                raise CLIError(f"{self.owner}: flag {name} must start with --{self.prefix}_")
        try:
            return self._group.add_argument(*names, **kwargs)
        except argparse.ArgumentError as exc:
            raise CLIError(f"{self.owner}: flag collision: {exc}") from exc


def parse_devices(text: str) -> list[int]:
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        raise argparse.ArgumentTypeError(f"expected a JSON list of device ids like [0], got {text!r}") from None
    if isinstance(value, int):
        value = [value]
    if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
        raise argparse.ArgumentTypeError(f"expected a JSON list of device ids like [0], got {text!r}")
    return value


def group_of(flag: str) -> str:
    for prefix in GROUPS:
        if flag.startswith(prefix + "_"):
            return prefix
    return "top"


@dataclass
class RunConfig:
    """Every resolved flag of one invocation, plus provenance."""

    command: str
    args: dict[str, Any]
    seed: int = 0
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    version: str = __version__

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise CLIError(f"unknown command {self.command!r}; expected one of {', '.join(COMMANDS)}")

    def group(self, prefix: str, strip: bool = True) -> dict[str, Any]:
        """Flags of one prefix group, keyed without the prefix by default."""
        out = {}
        for key, value in self.args.items():
            if group_of(key) == prefix:
                out[key[len(prefix) + 1:] if strip and prefix != "top" else key] = value
        return out

    def grouped(self) -> dict[str, dict[str, Any]]:
        return {g: self.group(g, strip=False) for g in ("top", *GROUPS) if self.group(g, strip=False)}

    def to_json(self) -> str:
        d = {
            "command": self.command,
            "seed": self.seed,
            "timestamp": self.timestamp,
            "version": self.version,
            "args": self.grouped(),
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        d = json.loads(text)
        args = {k: v for group in d["args"].values() for k, v in group.items()}
        return cls(d["command"], args, d["seed"], d["timestamp"], d["version"])

    def to_argv(self) -> list[str]:
        """A command line that parses back to the same ``args``."""
        argv: list[str] = []
        for key, value in sorted(self.args.items()):
            if value is None or value is False:
                continue
            if value is True:
                argv.append(f"--{key}")
            elif isinstance(value, list):
                argv += [f"--{key}", json.dumps(value)]
            else:
                argv += [f"--{key}", str(value)]
        return argv


def _selection_parser(command: str, registry: Registry) -> ArgumentParser:
    p = ArgumentParser(prog=f"mlenv {command}", add_help=False)
    p.add_argument("--datamodule", help=f"one of {', '.join(registry.names('datamodule'))}")
    p.add_argument("--model", default="fc", help=f"one of {', '.join(registry.names('model'))}")
    p.add_argument("--method", default="base", help=f"one of {', '.join(registry.names('method'))}")
    p.add_argument("--loss", default=None, choices=LOSSES, help="defaults to the task's natural loss")
    p.add_argument("--regularizer", default="none", help=f"one of {', '.join(registry.names('regularizer'))}")
    return p


def _add_run_flags(p: ArgumentParser, command: str) -> None:
    p.add_argument("--seed", type=int, default=0, help="root seed for init, splits and shuffling")
    p.add_argument("--save_path", default="./experiments", help="parent directory for run directories")
    p.add_argument(
        "--data_root",
        default=os.environ.get(DATA_ROOT_ENV, "./data"),
        help=f"dataset directory (env {DATA_ROOT_ENV})",
    )
    p.add_argument("--emit_plots", action="store_true", help="write loss/metric curve images")
    if command == "test":
        p.add_argument("--load_path", required=True, help="run directory or checkpoint file to evaluate")
    trainer = PrefixedGroup(p, "trainer", "trainer")
    trainer.add_argument("--trainer_epochs", type=int, default=3)
    trainer.add_argument("--trainer_devices", type=parse_devices, default=[0], help='JSON list, e.g. "[0]"')


def _add_tune_flags(p: ArgumentParser) -> None:
    p.add_argument("--config_file", required=True, help="search-space file")
    p.add_argument("--optimizer", required=True, choices=TUNERS, help="search strategy")
    p.add_argument("--save_path", default="./experiments/hpo", help="parent directory for the tuning run")
    p.add_argument("--max_wallclock_time", type=float, default=3600.0, help="launch budget in seconds")
    p.add_argument("--optimization_metric", default="validation_nll")
    p.add_argument("--optimization_mode", default=None, choices=("min", "max"))
    p.add_argument("--num_samples", type=int, default=10, help="trials drawn by random search")
    p.add_argument("--workers", type=int, default=1, help="trials run concurrently")
    p.add_argument("--seed", type=int, default=0, help="root seed; trial i uses seed + i")


def build_parser(command: str, selection: dict[str, str] | None = None, registry: Registry = REGISTRY):
    """The phase-2 parser for ``command`` given the phase-1 component names."""
    if command not in COMMANDS:
        raise CLIError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    if command == "tune":
        p = ArgumentParser(prog="mlenv tune")
        _add_tune_flags(p)
        return p
    p = _selection_parser(command, registry)
    p = ArgumentParser(prog=f"mlenv {command}", parents=[p])
    _add_run_flags(p, command)
    for kind in ("datamodule", "model", "method"):
        name = (selection or {}).get(kind)
        if name is None:
            continue
        factory = registry.resolve(kind, name)
        add = getattr(factory, "add_argparse_args", None)
        if add is not None:
            add(PrefixedGroup(p, kind, f"{kind} {name!r}"))
    return p


def parse_cli(argv: Sequence[str], command: str | None = None, registry: Registry = REGISTRY) -> RunConfig:
    """Parse ``argv`` into a RunConfig.

    The command is either passed explicitly or taken from ``argv[0]``.
    """
    argv = list(argv)
    if command is None:
        if not argv:
            raise CLIError(f"missing command; expected one of {', '.join(COMMANDS)}")
        command, argv = argv[0], argv[1:]
    if command not in COMMANDS:
        raise CLIError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    if command == "tune":
        ns = build_parser("tune").parse_args(argv)
        return RunConfig(command, vars(ns), seed=ns.seed)

    chosen, _ = _selection_parser(command, registry).parse_known_args(argv)
    if chosen.datamodule is None:
        raise CLIError(f"mlenv {command}: the following arguments are required: --datamodule")
    selection = {"datamodule": chosen.datamodule, "model": chosen.model, "method": chosen.method}
    try:
        for kind, name in selection.items():
            registry.resolve(kind, name)
        registry.resolve("regularizer", chosen.regularizer)
        parser = build_parser(command, selection, registry)
    except RegistryError as exc:
        raise CLIError(str(exc)) from None
    ns = parser.parse_args(argv)
    args = vars(ns)
    if args["loss"] is None:
        task = getattr(registry.resolve("datamodule", ns.datamodule), "task", TaskKind.CLASSIFICATION)
        args["loss"] = "mse" if task is TaskKind.REGRESSION else "crossentropy"
    return RunConfig(command, args, seed=ns.seed)
