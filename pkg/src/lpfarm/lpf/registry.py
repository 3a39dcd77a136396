"""Module implementation registry used by the activator."""
from __future__ import annotations

import importlib

from .errors import UnknownModule

_types: dict[str, type] = {}

# Packages whose import registers module implementations.
_PROVIDERS = (
    "lpfarm.lpf.core",
    "lpfarm.net.proxy",
    "lpfarm.naming.replica",
    "lpfarm.naming.broker",
    "lpfarm.config.activation",
    "lpfarm.config.bare",
    "lpfarm.procsup.module",
    "lpfarm.fsm.host",
    "lpfarm.farm.services",
    "lpfarm.farm.manager",
    "lpfarm.lpf.testing",
)
_loaded = False


def module_type(name: str):
    """Class decorator registering a module implementation under ``name``."""

    def deco(cls):
        _types[name] = cls
        return cls

    return deco


def load_providers():
    global _loaded
    if _loaded:
        return
    _loaded = True
    for pkg in _PROVIDERS:
        importlib.import_module(pkg)


def resolve(name: str) -> type:
    if name not in _types:
        load_providers()
    try:
        return _types[name]
    except KeyError:
        raise UnknownModule(f"no module implementation registered as {name!r}") from None


def known(name: str) -> bool:
    if name not in _types:
        load_providers()
    return name in _types


def names() -> list[str]:
    load_providers()
    return sorted(_types)
