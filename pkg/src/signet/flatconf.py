"""Flat ``key=value`` text serialization for dataclass configs.

Values are coerced from the type of each field's default: tuples are
comma-separated, booleans accept true/false/1/0, floats also accept ``a/b``.
"""

from __future__ import annotations

import dataclasses
from fractions import Fraction

from .exceptions import ConfigError


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_float(text: str) -> float:
    t = text.strip()
    try:
        if "/" in t:
            return float(Fraction(t))
        return float(t)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number: {text!r}") from None


def parse_int(text: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ConfigError(f"not an integer: {text!r}") from None


def coerce(text: str, like):
    """Parse ``text`` into the type of the example value ``like``."""
    if isinstance(like, bool):
        return parse_bool(text)
    if isinstance(like, int):
        return parse_int(text)
    if isinstance(like, float):
        return parse_float(text)
    if isinstance(like, (tuple, list)):
        item = like[0] if like else ""
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        return tuple(coerce(p, item) for p in parts)
    if like is None:
        t = text.strip()
        return None if t.lower() in ("", "none") else t
    return text.strip()


def defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def from_flat(cls, values: dict, strict: bool = True):
    """Build ``cls`` from string (or already typed) values."""
    base = defaults(cls)
    kwargs = {}
    for key, val in values.items():
        if key not in base:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        kwargs[key] = coerce(val, base[key]) if isinstance(val, str) else val
    return cls(**kwargs)


def to_flat(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def dumps(values: dict) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in values.items())


def loads(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val.strip()
    return out
