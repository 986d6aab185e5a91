"""Exception hierarchy shared by every module.

The CLI maps ``DataError`` subclasses to exit code 3 and ``ProtocolViolation``
to exit code 4.
"""

from __future__ import annotations


class EdccfError(Exception):
    """Base class for all toolkit errors."""


class DataError(EdccfError):
    """Input data could not be used as given."""


class ParseError(DataError):
    """A file could not be read or is not valid JSON / manifest text."""


class SchemaError(DataError):
    """Content violates the prediction / ground-truth schema."""


class ManifestMismatch(DataError):
    """Image-id set of a file differs from the evaluation manifest."""

    def __init__(self, message: str, missing: list[str] | None = None, extra: list[str] | None = None):
        super().__init__(message)
        self.missing = list(missing or [])
        self.extra = list(extra or [])


class InvalidThresholds(EdccfError, ValueError):
    pass


class InvalidDistribution(EdccfError, ValueError):
    pass


class MissingClass(EdccfError, KeyError):
    pass


class MissingRepairBranch(EdccfError, KeyError):
    pass


class InsufficientData(EdccfError, ValueError):
    pass


class AllZeroDeltas(EdccfError):
    """Every paired delta is zero; the signed-rank test has no evidence.

    Carries the conventional result ``p_value = 1``.
    """

    def __init__(self, n: int):
        super().__init__(f"all {n} deltas are zero; p = 1 by convention")
        self.statistic = 0.0
        self.p_value = 1.0


class ProtocolViolation(EdccfError):
    """A contract check (e.g. stable-class preservation) failed under --strict."""


class NonConvergence(UserWarning):
    """An iterative fit stopped at its iteration cap; the last iterate is still returned."""
