"""Shared key-value config format.

Every tunable dataclass in the package maps to one INI section::

    [anchors]
    strides = 4, 8, 16, 32, 64, 128
    base_scale = 2.5198420997897464

    [tta]
    shift_directions = (0, 0), (0, 1), (1, 0), (1, 1)

Values are Python literals (numbers, tuples, booleans); a bare
comma-separated list is read as a tuple.  Unknown sections or keys are
rejected with the offending ``section.key`` in the message.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import hashlib
import io
import typing
from typing import Any, Iterable, Mapping, TypeVar

T = TypeVar("T")

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def _coerce(value: Any, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        non_none = [a for a in args if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, non_none[0], key)
    if tp is bool:
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a real number, got {value!r}")
        return float(value)
    if tp is str:
        return str(value)
    if origin in (tuple, list):
        if not isinstance(value, (tuple, list)):
            value = (value,)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        if len(args) != len(value):
            raise ConfigError(key, f"expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    return value


def parse_value(text: str, key: str) -> Any:
    text = text.strip()
    if text.lower() in _TRUE | _FALSE and text not in ("0", "1"):
        return text.lower() in _TRUE
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    # allow unquoted strings (paths, mode names)
    if text and not any(c in text for c in "()[]{},"):
        return text
    raise ConfigError(key, f"cannot parse value {text!r}")


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if len(value) == 1 and not isinstance(value[0], tuple):
            return f"{format_value(value[0])},"
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def from_mapping(cls: type[T], values: Mapping[str, Any], section: str, base: T | None = None) -> T:
    """Build dataclass ``cls`` from raw values, overriding ``base`` (or defaults)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, raw in values.items():
        full = f"{section}.{key}"
        if key not in names:
            raise ConfigError(full, "unknown key")
        if isinstance(raw, str):
            raw = parse_value(raw, full)
        kwargs[key] = _coerce(raw, hints[key], full)
    try:
        if base is not None:
            return dataclasses.replace(base, **kwargs)
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(section, str(exc)) from None


def to_mapping(obj: Any) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.init}


def read_config(path_or_text: str, *, is_text: bool = False) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    try:
        if is_text:
            parser.read_string(path_or_text)
        else:
            with open(path_or_text, encoding="utf-8") as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def load_sections(
    raw: Mapping[str, Mapping[str, Any]],
    schema: Mapping[str, type],
    defaults: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """Resolve every section in ``schema`` from ``raw``; unknown sections fail."""
    for section in raw:
        if section not in schema:
            raise ConfigError(section, "unknown section")
    out = {}
    for section, cls in schema.items():
        base = None if defaults is None else defaults.get(section)
        out[section] = from_mapping(cls, raw.get(section, {}), section, base=base)
    return out


def apply_overrides(raw: dict[str, dict[str, Any]], overrides: Iterable[str]) -> dict[str, dict[str, Any]]:
    """Apply ``section.key=value`` strings on top of raw sections."""
    merged = {s: dict(v) for s, v in raw.items()}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(item, "override must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        merged.setdefault(section, {})[key] = value
    return merged


def dump_config(sections: Mapping[str, Any]) -> str:
    buf = io.StringIO()
    for i, (name, obj) in enumerate(sections.items()):
        if i:
            buf.write("\n")
        buf.write(f"[{name}]\n")
        for key, value in to_mapping(obj).items():
            buf.write(f"{key} = {format_value(value)}\n")
    return buf.getvalue()


def config_hash(sections: Mapping[str, Any]) -> str:
    return hashlib.sha256(dump_config(sections).encode("utf-8")).hexdigest()[:16]
