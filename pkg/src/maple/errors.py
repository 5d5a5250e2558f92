"""Exception hierarchy shared across the package."""

from __future__ import annotations


class MapleError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(MapleError, ValueError):
    pass


class SchemaValidationError(MapleError, ValueError):
    """A raw record does not conform to a metadata schema."""

    def __init__(self, attribute: str | None, message: str):
        self.attribute = attribute
        super().__init__(f"{attribute}: {message}" if attribute else message)


class BudgetExceededError(MapleError):
    """A charge would push the ledger past its granted budget."""


class StructuralError(MapleError):
    """The graphical model structure exceeds the configured size cap."""


class BackendError(MapleError):
    """A completion or embedding backend failed after exhausting retries."""


class RetryableBackendError(BackendError):
    """Transient failure; callers may retry."""


class ConfigError(MapleError):
    pass


class PipelineError(MapleError):
    pass


class EvaluationError(MapleError):
    pass
