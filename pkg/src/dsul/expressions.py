"""Expression variants and their plain-data encoding.

The workspace file encodes expressions as ordinary YAML values:

- scalars are literals; a string containing ``{{path}}`` holes is a template
- ``{var: run.x}`` reads a variable, ``{exists: session.name}`` tests presence
- ``{op: "<", lhs: ..., rhs: ...}`` compares; ``{op: and, operands: [...]}``
  combines truth values (``not`` takes exactly one operand)
- any other map or list is a composite whose entries are themselves
  expressions, so payload maps interpolate naturally
- ``{lit: ...}`` escapes a raw value that would otherwise parse as one of the
  forms above

Decoding from located parse nodes lives in the parser; this module owns the
model and the reverse (model -> plain data) direction used by canonical
serialization.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .paths import VarPath
from .values import Value

COMPARE_OPS = ("==", "!=", "<", "<=", ">", ">=")
LOGIC_OPS = ("and", "or", "not")

TEMPLATE_HOLE_RE = re.compile(r"\{\{\s*([^{}]*?)\s*\}\}")


@dataclass(frozen=True)
class Literal:
    value: Value


@dataclass(frozen=True)
class VarRef:
    path: VarPath


@dataclass(frozen=True)
class Template:
    text: str
    # parts: alternating literal text and VarPath holes, precomputed at parse
    parts: tuple = ()


@dataclass(frozen=True)
class Compare:
    op: str
    lhs: "Expression"
    rhs: "Expression"


@dataclass(frozen=True)
class Logic:
    op: str
    operands: tuple


@dataclass(frozen=True)
class Exists:
    path: VarPath


@dataclass(frozen=True)
class ListExpr:
    items: tuple


@dataclass(frozen=True)
class MapExpr:
    entries: tuple  # ordered (key, Expression) pairs; keys unique


Expression = Literal | VarRef | Template | Compare | Logic | Exists | ListExpr | MapExpr

# Map keys that select a special expression form when present.
SPECIAL_KEYS = ("var", "exists", "lit", "op")


def is_template_text(text: str) -> bool:
    return "{{" in text and TEMPLATE_HOLE_RE.search(text) is not None


def single_hole_path(tpl: Template) -> VarPath | None:
    """The path when the template is exactly one hole and nothing else."""
    if len(tpl.parts) == 3 and tpl.parts[0] == "" and tpl.parts[2] == "" and isinstance(tpl.parts[1], VarPath):
        return tpl.parts[1]
    return None


def expression_to_data(expr: Expression) -> Value:
    """Plain-data encoding that the parser decodes back to the same model."""
    if isinstance(expr, Literal):
        return _encode_literal(expr.value)
    if isinstance(expr, VarRef):
        return {"var": expr.path.render()}
    if isinstance(expr, Template):
        return expr.text
    if isinstance(expr, Compare):
        return {"op": expr.op, "lhs": expression_to_data(expr.lhs), "rhs": expression_to_data(expr.rhs)}
    if isinstance(expr, Logic):
        return {"op": expr.op, "operands": [expression_to_data(op) for op in expr.operands]}
    if isinstance(expr, Exists):
        return {"exists": expr.path.render()}
    if isinstance(expr, ListExpr):
        return [expression_to_data(item) for item in expr.items]
    if isinstance(expr, MapExpr):
        return {key: expression_to_data(val) for key, val in expr.entries}
    raise TypeError(f"not an expression: {expr!r}")


def _encode_literal(value: Value) -> Value:
    # Composite literals only arise from an explicit lit escape, and a string
    # with template holes would re-parse as a Template; both stay escaped.
    if isinstance(value, (dict, list)):
        return {"lit": value}
    if isinstance(value, str) and is_template_text(value):
        return {"lit": value}
    return value
