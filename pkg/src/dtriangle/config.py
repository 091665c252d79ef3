"""Flat ``key = value`` config files mapped onto dataclasses.

Keys without a dot address :class:`~dtriangle.trainer.TrainConfig`; other
sections use a prefix (``model.latent_dim``, ``landscape.step``,
``data.source``, ...). Tuples are written comma-separated, booleans as
``true``/``false``, ``none`` clears an optional value.
"""

from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv_file(path: str) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_kv(text, path)


def _coerce(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or str(origin) == "types.UnionType":
        if value.lower() == "none" and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    try:
        if tp is bool:
            v = value.lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return v in ("true", "1", "yes")
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return value
        if origin is tuple:
            item = args[0] if args else str
            parts = [p.strip() for p in value.split(",") if p.strip()]
            return tuple(_coerce(p, item, key) for p in parts)
    except ValueError:
        raise ConfigError(f"invalid value {value!r} for key {key!r}") from None
    raise ConfigError(f"unsupported field type for {key!r}")


def apply_overrides(obj, values: dict[str, str], prefix: str = ""):
    """Return a copy of dataclass ``obj`` with string ``values`` coerced and applied."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        changes[key] = _coerce(raw, hints[key], prefix + key)
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def split_sections(values: dict[str, str], sections: typing.Iterable[str]) -> dict[str, dict[str, str]]:
    """Group keys by prefix; unprefixed keys land in section ``""``."""
    sections = set(sections)
    out: dict[str, dict[str, str]] = {s: {} for s in sections}
    out.setdefault("", {})
    for key, value in values.items():
        if "." in key:
            sec, rest = key.split(".", 1)
            if sec not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            out[sec][rest] = value
        else:
            out[""][key] = value
    return out


def dump_kv(sections: dict[str, object]) -> str:
    """Render dataclasses back into the flat format (round-trips through :func:`parse_kv`)."""
    lines = []
    for sec, obj in sections.items():
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, (tuple, list)):
                s = ",".join(str(x) for x in v)
            elif v is None:
                s = "none"
            else:
                s = repr(v) if isinstance(v, float) else str(v)
            key = f"{sec}.{f.name}" if sec else f.name
            lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"
