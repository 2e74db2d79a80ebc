"""The value model: JSON-like data carried by events, config, and scopes.

A value is one of: None, bool, int/float (one numeric kind, 64-bit float
semantics), str, list of values, dict with non-empty str keys. Integers are
kept as ``int`` while exactly representable in a float64 so that canonical
rendering can stay in shortest form; ``3`` and ``3.0`` are the same number.

Values are treated as immutable once constructed: ``ensure_value`` returns a
deep copy of its input, and nothing in the engine mutates a value in place
after handing it out.
"""

from __future__ import annotations

import json
import math
from typing import Any

from .errors import ValueShapeError

Value = Any  # None | bool | int | float | str | list["Value"] | dict[str, "Value"]

# Largest integer magnitude a float64 represents exactly.
MAX_EXACT_INT = 2**53


def ensure_value(obj: Any, path: str = "$") -> Value:
    """Validate and normalize an arbitrary Python object into a value.

    Returns a deep copy; raises ValueShapeError for non-value shapes,
    non-finite numbers, or bad map keys.
    """
    if obj is None or isinstance(obj, bool) or isinstance(obj, str):
        return obj
    if isinstance(obj, int):
        if -MAX_EXACT_INT <= obj <= MAX_EXACT_INT:
            return obj
        return float(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueShapeError(f"{path}: non-finite number")
        return obj
    if isinstance(obj, (list, tuple)):
        return [ensure_value(item, f"{path}[{i}]") for i, item in enumerate(obj)]
    if isinstance(obj, dict):
        out: dict[str, Value] = {}
        for key, item in obj.items():
            if not isinstance(key, str) or not key:
                raise ValueShapeError(f"{path}: map keys must be non-empty text")
            out[key] = ensure_value(item, f"{path}.{key}")
        return out
    raise ValueShapeError(f"{path}: {type(obj).__name__} is not a value")


def is_value(obj: Any) -> bool:
    try:
        ensure_value(obj)
        return True
    except ValueShapeError:
        return False


def value_equal(a: Value, b: Value) -> bool:
    """Deep equality where booleans are distinct from numbers.

    Python's own ``==`` treats True as 1; the value model does not.
    """
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return float(a) == float(b)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(value_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(value_equal(v, b[k]) for k, v in a.items())
    if type(a) is not type(b):
        return False
    return a == b


def render_number(num: int | float) -> str:
    """Shortest decimal text that round-trips to the same float64."""
    if isinstance(num, bool):  # guard: bools are not numbers
        raise ValueShapeError("boolean is not a number")
    if isinstance(num, int):
        return str(num)
    if num.is_integer() and -MAX_EXACT_INT <= num <= MAX_EXACT_INT:
        return str(int(num))
    return repr(num)


def render_text(value: Value) -> str:
    """Text rendering used by template substitution.

    null becomes empty text; lists and maps render as compact JSON with
    sorted keys so the result is deterministic.
    """
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value
    if isinstance(value, (int, float)):
        return render_number(value)
    return compact_json(value)


def compact_json(value: Value) -> str:
    """Deterministic single-line JSON: sorted keys, no whitespace."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=_json_default)


def _json_default(obj: Any):
    raise ValueShapeError(f"{type(obj).__name__} is not JSON-serializable as a value")


def is_truthy(value: Value) -> bool:
    """false, null, 0, and empty text are falsy; everything else is truthy."""
    if value is None or value is False:
        return False
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)):
        return value != 0
    if isinstance(value, str):
        return value != ""
    return True


def deep_copy(value: Value) -> Value:
    if isinstance(value, list):
        return [deep_copy(v) for v in value]
    if isinstance(value, dict):
        return {k: deep_copy(v) for k, v in value.items()}
    return value
