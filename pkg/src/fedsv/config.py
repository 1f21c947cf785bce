"""Flat ``key = value`` config files with dotted section names.

Grammar, one entry per line::

    # comment (also allowed after a value)
    num_clients = 20
    train.learning_rate = 0.005
    defense.kind = fedsv
    fedsv.alpha = none          # "none" clears an optional field
    sweep.defenses = fedsv, fedavg, multi_krum

Top-level keys map to ``RunConfig`` fields; ``section.key`` maps to the field
of the nested section. Booleans are ``true``/``false``. Keys under ``sweep.``
are not part of a single run and come back separately.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .errors import ConfigError
from .orchestrator import RunConfig

SWEEP_KEYS = {"sweep.defenses": "list", "sweep.fractions": "floats", "sweep.reps": "int"}


def _field_types(cls):
    return typing.get_type_hints(cls)


def _unwrap_optional(tp):
    args = typing.get_args(tp)
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        inner = [a for a in args if a is not type(None)]
        return inner[0], True
    return tp, False


def _coerce(raw: str, tp):
    tp, optional = _unwrap_optional(tp)
    if optional and raw.lower() == "none":
        return None
    if tp is bool:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if tp is str:
        return raw
    raise TypeError(f"unsupported field type {tp!r}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_entries(text: str):
    """Parse lines into ``{key: (raw_value, line_number)}``."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, raw = (part.strip() for part in body.split("=", 1))
        if not key:
            raise ConfigError("missing key", line=lineno)
        if key in entries:
            raise ConfigError("duplicate key", line=lineno, key=key)
        entries[key] = (raw, lineno)
    return entries


def _build(cls, entries, prefix=""):
    kwargs = {}
    hints = _field_types(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        key = prefix + f.name
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, entries, key + ".")
        elif key in entries:
            raw, lineno = entries.pop(key)
            try:
                kwargs[f.name] = _coerce(raw, tp)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc), line=lineno, key=key) from exc
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section '{prefix.rstrip('.') or 'top-level'}': {exc}") from exc


def _sweep_value(raw, kind, lineno, key):
    try:
        if kind == "int":
            return int(raw)
        items = [x.strip() for x in raw.split(",") if x.strip()]
        return [float(x) for x in items] if kind == "floats" else items
    except ValueError as exc:
        raise ConfigError(str(exc), line=lineno, key=key) from exc


def parse_config(text: str):
    """Return ``(RunConfig, sweep_options)``; raises ConfigError with line/field."""
    entries = read_entries(text)
    sweep = {}
    for key, kind in SWEEP_KEYS.items():
        if key in entries:
            raw, lineno = entries.pop(key)
            sweep[key.split(".", 1)[1]] = _sweep_value(raw, kind, lineno, key)
    cfg = _build(RunConfig, entries)
    if entries:
        key, (_, lineno) = min(entries.items(), key=lambda kv: kv[1][1])
        raise ConfigError("unknown key", line=lineno, key=key)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, sweep


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _dump_lines(obj, prefix=""):
    lines = []
    nested = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            nested.append((prefix + f.name + ".", value))
        else:
            lines.append(f"{prefix}{f.name} = {_format(value)}")
    for sub_prefix, value in nested:
        lines.append("")
        lines.extend(_dump_lines(value, sub_prefix))
    return lines


def dump_config(cfg: RunConfig, sweep: dict | None = None) -> str:
    lines = _dump_lines(cfg)
    if sweep:
        lines.append("")
        for key, value in sweep.items():
            if isinstance(value, list):
                value = ", ".join(_format(v) for v in value)
            lines.append(f"sweep.{key} = {_format(value)}")
    return "\n".join(lines) + "\n"
