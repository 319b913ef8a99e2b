"""Deterministic JSON emission and config-file parsing.

Reports and traces must be byte-identical across reruns, so floats are
formatted with 17 significant digits (exact float64 round trip) and dict
key order is preserved as inserted.
"""
from __future__ import annotations

import json
import math
from typing import Any

import numpy as np


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"non-finite value in deterministic output: {x!r}")
    s = format(x, ".17g")
    # keep a float marker so the value reloads as float, not int
    if "." not in s and "e" not in s and "E" not in s and "inf" not in s:
        s += ".0"
    return s


def dumps(obj: Any, indent: int = 0, _level: int = 0) -> str:
    """Serialize to JSON with deterministic float formatting.

    Dicts keep insertion order. numpy scalars are coerced; ndarrays must be
    converted to lists by the caller so the node order is explicit.
    """
    if isinstance(obj, np.ndarray):
        raise TypeError("convert ndarray to list before serializing")
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=True)
    pad = " " * (indent * (_level + 1)) if indent else ""
    close_pad = " " * (indent * _level) if indent else ""
    sep = ",\n" + pad if indent else ", "
    if isinstance(obj, (list, tuple)):
        if len(obj) == 0:
            return "[]"
        body = sep.join(dumps(v, indent, _level + 1) for v in obj)
        if indent:
            return "[\n" + pad + body + "\n" + close_pad + "]"
        return "[" + body + "]"
    if isinstance(obj, dict):
        if len(obj) == 0:
            return "{}"
        items = []
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError(f"JSON object keys must be str, got {type(k)}")
            items.append(json.dumps(k) + ": " + dumps(v, indent, _level + 1))
        body = sep.join(items)
        if indent:
            return "{\n" + pad + body + "\n" + close_pad + "}"
        return "{" + body + "}"
    raise TypeError(f"cannot serialize {type(obj)}")


def dump_line(obj: Any) -> str:
    """One JSONL record, newline-terminated."""
    return dumps(obj) + "\n"


def loads(text: str) -> Any:
    return json.loads(text)


# config files are plain "key = value" lines; # starts a comment
def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        out[key] = value.strip()
    return out


def coerce_config(raw: dict[str, str], schema: dict[str, type]) -> dict[str, Any]:
    """Coerce string config values by a {key: type} schema.

    Supported types: int, float, str, bool, and list (comma-separated floats).
    Unknown keys raise so typos do not silently pass.
    """
    out: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in schema:
            raise ValueError(f"unknown config key {key!r}")
        kind = schema[key]
        if kind is bool:
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                out[key] = True
            elif low in ("false", "0", "no", "off"):
                out[key] = False
            else:
                raise ValueError(f"config key {key!r}: expected boolean, got {value!r}")
        elif kind is list:
            out[key] = [float(tok) for tok in value.split(",") if tok.strip()]
        else:
            out[key] = kind(value)
    return out
