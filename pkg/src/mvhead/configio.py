"""Flat key=value config files mapped onto TrainConfig fields.

Format: one `key = value` pair per line, `#` comments, blank lines ignored.
Keys are exactly the TrainConfig field names; values are coerced by the
field's type (channel_mults as a comma list, booleans as true/false/1/0).
"""

from __future__ import annotations

import typing
from dataclasses import fields, replace
from pathlib import Path

from .training import TrainConfig

_HINTS = typing.get_type_hints(TrainConfig)
_KNOWN = {f.name for f in fields(TrainConfig)}


def coerce_value(key: str, raw: str):
    if key not in _KNOWN:
        raise ValueError(f"unknown config key {key!r}")
    ty = _HINTS[key]
    raw = raw.strip()
    if ty is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: cannot parse {raw!r} as bool")
    if ty is int:
        return int(raw)
    if ty is float:
        return float(raw)
    if ty is tuple:
        return tuple(int(part) for part in raw.split(","))
    return raw


def parse_config_text(text: str) -> dict:
    """Raw key -> string value pairs from config text, validating syntax."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = raw.strip()
    return out


def load_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    """TrainConfig from a file, with optional raw-string overrides winning."""
    raw = parse_config_text(Path(path).read_text())
    if overrides:
        raw.update(overrides)
    values = {key: coerce_value(key, val) for key, val in raw.items()}
    return TrainConfig(**values)


def apply_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    """Replace fields from raw-string overrides (CLI flags win over files)."""
    values = {key: coerce_value(key, val) for key, val in overrides.items()}
    return replace(config, **values)


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in sorted(fields(TrainConfig), key=lambda f: f.name):
        val = getattr(config, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
