"""Flat ``key = value`` config files mapped onto dataclasses.

Blank lines and ``#`` comments are ignored.  Values are converted using
the dataclass field's default type (bool, int, float or str).
"""

from __future__ import annotations

import dataclasses


def read_flat_config(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _convert(value, like):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        v = str(value).lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value if value is None else str(value)


def apply_config(obj, values: dict, prefix: str = "", strict: bool = False):
    """Return a copy of dataclass ``obj`` with matching keys overridden."""
    changes = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if prefix:
            if not key.startswith(prefix):
                continue
            key = key[len(prefix):]
        if key in names:
            changes[key] = _convert(value, getattr(obj, key))
        elif strict:
            raise KeyError(f"unknown config key {prefix + key!r}")
    return dataclasses.replace(obj, **changes)


def to_flat(obj, prefix: str = "") -> dict:
    return {prefix + f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def format_flat(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(values.items()))
