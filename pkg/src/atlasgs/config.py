"""key = value config files and typed overrides for the dataclass configs."""
from __future__ import annotations

import dataclasses
import os
import typing

from .util import DataError


def parse_kv_file(path: str | os.PathLike) -> dict[str, str]:
    """Parse a ``key = value`` text file; '#' starts a comment."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DataError(f"missing config file: {path}")
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise DataError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
            key, value = text.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(value: str, target_type) -> object:
    origin = typing.get_origin(target_type)
    if origin is typing.Union:
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        target_type = args[0]
        origin = typing.get_origin(target_type)
    if target_type is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise DataError(f"cannot parse bool from {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is str:
        return value
    if target_type is tuple or origin is tuple:
        parts = [p for p in value.replace(",", " ").split() if p]
        return tuple(int(p) if p.lstrip("+-").isdigit() else float(p) for p in parts)
    raise DataError(f"unsupported config field type {target_type}")


def apply_overrides(config, overrides: dict[str, str]):
    """Return a copy of a dataclass config with string overrides coerced in."""
    names = {f.name for f in dataclasses.fields(config)}
    hints = typing.get_type_hints(type(config))
    updates = {}
    for key, value in overrides.items():
        if key not in names:
            raise DataError(f"unknown config field {key!r}; known fields: "
                            + ", ".join(sorted(names)))
        try:
            updates[key] = _coerce(value, hints[key])
        except (ValueError, TypeError) as exc:
            raise DataError(f"bad value for {key!r}: {value!r} ({exc})") from exc
    return dataclasses.replace(config, **updates)


def format_config(config) -> str:
    """Render a dataclass config as the key = value lines we accept back."""
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines)
