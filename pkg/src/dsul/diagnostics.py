"""Diagnostics: every parser, validator, and resolver finding carries a stable
code from the registry below, a severity, and a source location."""

from __future__ import annotations

from dataclasses import dataclass, field

ERROR = "error"
WARNING = "warning"

# Published registry of diagnostic codes. Raising a diagnostic with a code
# missing from this table is a programming error (guarded in Diagnostic).
CODES: dict[str, str] = {
    "DSUL-encoding": "document bytes are not valid UTF-8",
    "DSUL-syntax": "document is not well-formed YAML",
    "DSUL-duplicate-key": "the same key appears twice in one map",
    "DSUL-duplicate-slug": "the same slug is declared twice at one level",
    "DSUL-no-anchors": "anchors/aliases are outside the supported subset and were expanded",
    "DSUL-anchor-cycle": "an alias refers back into itself and cannot be expanded",
    "DSUL-unknown-tag": "a node carries a custom tag the engine does not accept",
    "DSUL-too-large": "document expands past the size guard",
    "DSUL-type-mismatch": "a node has the wrong kind or type for its position",
    "DSUL-unknown-key": "a key is not recognized at this position",
    "DSUL-unknown-instruction": "an instruction node is not a single-key map or bare break",
    "DSUL-slug-invalid": "an identifier does not match the slug grammar",
    "DSUL-event-name-invalid": "an event name is not dotted slug segments (1-8)",
    "DSUL-reserved-event": "a custom event name uses the reserved runtime. prefix",
    "DSUL-unknown-native": "a trigger listens to a runtime. event outside the native catalog",
    "DSUL-reserved-keyword": "an automation slug shadows a reserved instruction keyword",
    "DSUL-trigger-empty": "a trigger names no events and is not an endpoint",
    "DSUL-duplicate-event": "the same event name appears twice in one trigger",
    "DSUL-argument-type-invalid": "an argument spec uses a type outside the fixed set",
    "DSUL-expression-invalid": "an expression node is malformed",
    "DSUL-unknown-operator": "an expression uses an operator the engine does not define",
    "DSUL-template-invalid": "a template hole does not contain a valid variable path",
    "DSUL-path-invalid": "a variable path is malformed",
    "DSUL-readonly-scope": "a write targets the read-only config or arguments scope",
    "DSUL-empty-body": "a construct that requires a non-empty body has none",
    "DSUL-block-unknown": "a block kind is not one of the builtin kinds",
    "DSUL-version-invalid": "an import version is not a positive integer",
    "DSUL-unresolved-call": "a call names an automation that does not exist",
    "DSUL-call-cycle": "automations call each other in a cycle",
    "DSUL-event-never-listened": "an event is emitted but nothing listens to it",
    "DSUL-event-never-emitted": "an event is listened to but never emitted, is not native, and is not page-bound",
    "DSUL-function-name-invalid": "a host function name is not dotted slug segments",
    "DSUL-unknown-function": "a custom instruction names an unregistered host function",
    "DSUL-private-access": "a private automation is called from outside its app",
    "DSUL-import-unresolved": "an import references an app version the registry does not hold",
    "DSUL-install-cycle": "apps import each other in a cycle",
    "DSUL-install-depth": "imports nest deeper than the cap",
    "DSUL-io": "a file could not be read",
}


@dataclass(frozen=True)
class Location:
    file: str = "<memory>"
    line: int = 1
    column: int = 1
    # JSON-Pointer style: "" is the document root, then /-separated segments.
    json_path: str = ""


@dataclass(frozen=True)
class Diagnostic:
    severity: str
    code: str
    message: str
    location: Location = field(default_factory=Location)

    def __post_init__(self):
        if self.code not in CODES:
            raise AssertionError(f"diagnostic code not in registry: {self.code}")
        if self.severity not in (ERROR, WARNING):
            raise AssertionError(f"bad severity: {self.severity}")

    def to_data(self) -> dict:
        return {
            "severity": self.severity,
            "code": self.code,
            "message": self.message,
            "location": {
                "file": self.location.file,
                "line": self.location.line,
                "column": self.location.column,
                "jsonPath": self.location.json_path,
            },
        }

    def render(self) -> str:
        loc = self.location
        where = f" ({loc.json_path})" if loc.json_path else ""
        return f"{loc.file}:{loc.line}:{loc.column}: {self.severity}[{self.code}] {self.message}{where}"


def error(code: str, message: str, location: Location | None = None) -> Diagnostic:
    return Diagnostic(ERROR, code, message, location or Location())


def warning(code: str, message: str, location: Location | None = None) -> Diagnostic:
    return Diagnostic(WARNING, code, message, location or Location())


def has_errors(diags) -> bool:
    return any(d.severity == ERROR for d in diags)


def sort_diagnostics(diags) -> list[Diagnostic]:
    """Deterministic order: by file, line, column, severity, code, message."""
    return sorted(
        diags,
        key=lambda d: (d.location.file, d.location.line, d.location.column, d.severity, d.code, d.message),
    )
