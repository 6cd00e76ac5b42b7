import copy
from typing import Any, Iterable

import yaml

from kvpool.core.exceptions import ConfigError


def get_version():
    try:
        from kvpool import __version__

        return __version__
    except ImportError:
        return None


def recursive_update(base: dict, update: dict) -> dict:
    """Return a deep copy of base with update merged in. Nested dicts are merged,
    every other value (including lists) is replaced."""
    result = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(result.get(k), dict):
            result[k] = recursive_update(result[k], v)
        else:
            result[k] = copy.deepcopy(v)
    return result


def set_nested(d: dict, dotted_key: str, value: Any):
    """Set d[a][b][c] = value for dotted_key 'a.b.c', creating sections as needed."""
    parts = dotted_key.split(".")
    node = d
    for i, part in enumerate(parts[:-1]):
        if part not in node or node[part] is None:
            node[part] = {}
        elif not isinstance(node[part], dict):
            raise ConfigError(
                f"can not set {dotted_key}: {'.'.join(parts[:i + 1])} is not a section",
                path=dotted_key,
            )
        node = node[part]
    node[parts[-1]] = value


def parse_overrides(overrides: Iterable[str]) -> dict:
    """
    Turn ``key.path=value`` strings into a nested settings dict.

    Values are parsed as YAML scalars, so ``2.0`` becomes a float, ``true`` a bool
    and ``[1, 2]`` a list.
    """
    result = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"override {item!r} has an empty key")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"could not parse value {raw!r}: {e}", path=key)
        set_nested(result, key, value)
    return result
