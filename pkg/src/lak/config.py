"""Flat ``key = value`` configuration files and typed dataclass conversion."""

from __future__ import annotations

import dataclasses
import typing
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment line; later keys override earlier ones."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv_file(path: str) -> Dict[str, str]:
    with open(path, encoding="utf-8") as handle:
        return parse_kv_text(handle.read(), path)


def format_kv(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(values.items()))


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    return str(v)


def _coerce(raw: Any, typ, key: str):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if raw is None or raw == "":
            return None
        return _coerce(raw, args[0], key)
    if not isinstance(raw, str):
        if typ is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        return raw
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def dataclass_from_kv(cls: Type[T], values: Mapping[str, Any], strict: bool = True) -> T:
    """Build ``cls`` from string or typed values, rejecting unknown keys when ``strict``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if strict and unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items() if k in names}
    return cls(**kwargs)


def dataclass_to_kv(obj, keys: Optional[set] = None) -> Dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)
            if keys is None or f.name in keys}
