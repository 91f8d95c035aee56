"""Name -> factory lookup for selectable components."""

from __future__ import annotations

import difflib
from typing import Any, Callable

from mlenv.data import MNISTDataModule, SyntheticClassificationDataModule, SyntheticRegressionDataModule
from mlenv.methods import REGULARIZERS, BaseMethod
from mlenv.models import FCModel

KINDS = ("datamodule", "model", "method", "regularizer")


class RegistryError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


class Registry:
    def __init__(self):
        self._tables: dict[str, dict[str, Callable[..., Any]]] = {kind: {} for kind in KINDS}

    def _table(self, kind: str) -> dict[str, Callable[..., Any]]:
        try:
            return self._tables[kind]
        except KeyError:
            raise RegistryError(f"unknown component kind {kind!r}; expected one of {KINDS}") from None

    def register(self, kind: str, name: str, factory: Callable[..., Any]) -> Callable[..., Any]:
        table = self._table(kind)
        if name in table:
            raise RegistryError(f"{kind} {name!r} is already registered")
        table[name] = factory
        return factory

    def resolve(self, kind: str, name: str) -> Callable[..., Any]:
        table = self._table(kind)
        if name in table:
            return table[name]
        close = difflib.get_close_matches(name, table, n=1)
        hint = f" (did you mean {close[0]!r}?)" if close else ""
        raise RegistryError(f"unknown {kind} {name!r}{hint}; available: {', '.join(sorted(table))}")

    def names(self, kind: str) -> list[str]:
        return sorted(self._table(kind))


def default_registry() -> Registry:
    reg = Registry()
    for dm in (MNISTDataModule, SyntheticClassificationDataModule, SyntheticRegressionDataModule):
        reg.register("datamodule", dm.name, dm)
    reg.register("model", FCModel.name, FCModel)
    reg.register("method", BaseMethod.name, BaseMethod)
    for name, fn in REGULARIZERS.items():
        reg.register("regularizer", name, fn)
    return reg


REGISTRY = default_registry()


def register(kind: str, name: str, factory=None):
    """Register into the global registry; usable as a decorator when ``factory`` is omitted."""
    if factory is None:
        return lambda f: REGISTRY.register(kind, name, f)
    return REGISTRY.register(kind, name, factory)


def resolve(kind: str, name: str):
    return REGISTRY.resolve(kind, name)
