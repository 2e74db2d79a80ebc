"""Instruction model: the statements an automation body is made of.

Each instruction is a frozen dataclass.  Bodies are plain tuples so the
model is hashable and safe to share between threads; the interpreter never
mutates a workspace after load.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from .expressions import Expression
from .paths import VarPath

# Keywords that name instructions in the one-key-map syntax.  Automations
# may not use these as slugs, otherwise a call step would be ambiguous.
RESERVED_INSTRUCTION_KEYWORDS = frozenset(
    {
        "set",
        "delete",
        "conditions",
        "repeat",
        "all",
        "break",
        "emit",
        "wait",
        "fetch",
        "custom",
        "comment",
    }
)

DEFAULT_WAIT_TIMEOUT_MS = 20000
DEFAULT_FETCH_METHOD = "GET"
DEFAULT_ITEM_VAR = "item"

FETCH_METHODS = ("GET", "POST", "PUT", "PATCH", "DELETE", "HEAD")


@dataclass(frozen=True)
class SetVar:
    path: VarPath
    value: Expression


@dataclass(frozen=True)
class DeleteVar:
    path: VarPath


@dataclass(frozen=True)
class ConditionArm:
    test: Expression
    body: tuple["Instruction", ...]


@dataclass(frozen=True)
class Conditions:
    arms: tuple[ConditionArm, ...]
    otherwise: Optional[tuple["Instruction", ...]] = None


@dataclass(frozen=True)
class Repeat:
    source: Expression
    body: tuple["Instruction", ...]
    item_var: str = DEFAULT_ITEM_VAR


@dataclass(frozen=True)
class AllBranches:
    branches: tuple[tuple["Instruction", ...], ...]


@dataclass(frozen=True)
class Break:
    pass


@dataclass(frozen=True)
class Emit:
    event: str
    payload: Optional[Expression] = None


@dataclass(frozen=True)
class Wait:
    event: str
    timeout_ms: int = DEFAULT_WAIT_TIMEOUT_MS
    into: Optional[VarPath] = None


@dataclass(frozen=True)
class Fetch:
    url: Expression
    method: str = DEFAULT_FETCH_METHOD
    headers: tuple[tuple[str, Expression], ...] = ()
    body: Optional[Expression] = None
    into: Optional[VarPath] = None


@dataclass(frozen=True)
class CallAutomation:
    target: str
    arguments: tuple[tuple[str, Expression], ...] = ()
    into: Optional[VarPath] = None


@dataclass(frozen=True)
class Custom:
    function: str
    arguments: tuple[tuple[str, Expression], ...] = ()
    into: Optional[VarPath] = None


@dataclass(frozen=True)
class Comment:
    text: str


Instruction = Union[
    SetVar,
    DeleteVar,
    Conditions,
    Repeat,
    AllBranches,
    Break,
    Emit,
    Wait,
    Fetch,
    CallAutomation,
    Custom,
    Comment,
]


def child_bodies(instr: Instruction) -> Iterator[tuple[str, tuple[Instruction, ...]]]:
    """Yield (json path fragment, body) for every nested body of one step."""
    if isinstance(instr, Conditions):
        for i, arm in enumerate(instr.arms):
            yield f"/conditions/{i}/then", arm.body
        if instr.otherwise is not None:
            yield f"/conditions/{len(instr.arms)}/else", instr.otherwise
    elif isinstance(instr, Repeat):
        yield "/repeat/do", instr.body
    elif isinstance(instr, AllBranches):
        for i, branch in enumerate(instr.branches):
            yield f"/all/{i}", branch


def walk_instructions(
    body: tuple[Instruction, ...], base_path: str
) -> Iterator[tuple[str, Instruction]]:
    """Depth-first walk yielding (json path, instruction) for static analysis."""
    for i, instr in enumerate(body):
        path = f"{base_path}/{i}"
        yield path, instr
        for fragment, nested in child_bodies(instr):
            yield from walk_instructions(nested, path + fragment)
