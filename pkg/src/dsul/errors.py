"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class DsulError(Exception):
    """Base class for all engine errors."""


class ValueShapeError(DsulError):
    """A Python object does not fit the value model (payloads, config)."""


class BrokerClosed(DsulError):
    """Publish or subscribe attempted on a closed broker."""


class UnknownSubscription(DsulError):
    """Unsubscribe called with an id the broker does not know."""


class DuplicateFunction(DsulError):
    """A host function name was registered twice."""


class UnknownFunction(DsulError):
    """A custom instruction referenced an unregistered host function."""


class EventBudgetExhausted(DsulError):
    """A correlation chain emitted more custom events than its budget."""


class RegistryIO(DsulError):
    """Filesystem failure while reading or writing the app registry."""


class UnknownApp(DsulError):
    """Registry lookup for an app slug that was never published."""


class UnknownVersion(DsulError):
    """Registry lookup for a version that does not exist."""


class TamperDetected(DsulError):
    """Stored app bytes no longer match the recorded content hash."""


class ValidationFailed(DsulError):
    """An operation required an error-free workspace and did not get one."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class ResolveFailed(ValidationFailed):
    """Import resolution failed (missing app, cycle, or depth cap)."""


class WorkspaceLoadError(ValidationFailed):
    """A workspace file could not be loaded into the runtime."""


class UnknownWorkspace(DsulError):
    """An operation referenced a workspace id that is not loaded."""


class UnknownEndpoint(DsulError):
    """No endpoint-triggered automation answers to this slug."""


class UnknownPage(DsulError):
    """No page with this slug in the workspace."""


class IngestRejected(DsulError):
    """An external event was refused at the door (bad name or payload)."""


class PortInUse(DsulError):
    """The gateway bind address is already taken."""


class BindFailed(DsulError):
    """The gateway could not bind for a reason other than a busy port."""


class BenchSetupFailed(DsulError):
    """The benchmark workspace does not expose the echo automation."""
