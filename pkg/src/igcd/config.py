"""Flat `key = value` configuration files with lossless round-tripping.

Floats are written with repr so parsing them back recovers the exact value.
List-valued fields use comma-separated integers.
"""

from __future__ import annotations

import dataclasses
from typing import get_type_hints

from .core import ConfigurationError


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(int(v)) for v in value)
    return str(value)


def _parse_value(text: str, typ):
    text = text.strip()
    try:
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if typ is str:
            return text
        origin = getattr(typ, "__origin__", None)
        if origin in (list, tuple):
            if not text:
                return ()
            return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {text!r} as {typ}") from exc
    raise ConfigurationError(f"unsupported config field type {typ}")


def format_config(obj) -> str:
    """Render a dataclass instance as flat key = value lines."""
    lines = []
    for f in dataclasses.fields(obj):
        lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, cls, overrides: dict[str, str] | None = None):
    """Parse flat key = value lines into an instance of `cls`.

    Unknown keys are rejected; `overrides` are applied on top of the file.
    """
    hints = get_type_hints(cls)
    known = {f.name: hints[f.name] for f in dataclasses.fields(cls)}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r} for {cls.__name__}")
        values[key] = _parse_value(value, known[key])
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ConfigurationError(f"override names unknown key {key!r} for {cls.__name__}")
        values[key] = _parse_value(value, known[key])
    return cls(**values)


def load_config(path, cls, overrides: dict[str, str] | None = None):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), cls, overrides)


def save_config(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(obj))
