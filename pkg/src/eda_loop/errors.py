"""Exception hierarchy shared across the package.

Every failure that can reach a caller is an ``EdaLoopError`` subclass so
that CLI and server layers can map errors to exit codes / protocol codes
without string matching.
"""

from __future__ import annotations


class EdaLoopError(Exception):
    """Base class for all package errors."""


class InvalidMetricsError(EdaLoopError):
    """A metrics value violates its invariants (sign, finiteness, units)."""


class InvalidReferenceError(EdaLoopError):
    """A normalization reference point is nonpositive."""


class ScriptParseError(EdaLoopError):
    """Command-sequence text could not be parsed.

    ``offset`` is the byte offset (UTF-8) of the offending input when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class FeatureError(EdaLoopError):
    """A script is structurally valid but a feature value is malformed."""


class UnresolvedPlaceholderError(EdaLoopError):
    """Placeholders remained unbound during substitution."""

    def __init__(self, names: list[str]):
        super().__init__(f"unresolved placeholders: {', '.join(sorted(names))}")
        self.names = sorted(names)


class MalformedReportError(EdaLoopError):
    """A tool report is missing required content or has bad values."""


class ToolFailureError(EdaLoopError):
    """An external tool exited nonzero or produced unusable output."""

    def __init__(self, message: str, stage: str = "", stderr_tail: str = ""):
        super().__init__(message)
        self.stage = stage
        self.stderr_tail = stderr_tail


class ToolTimeoutError(ToolFailureError):
    """An external tool exceeded its wall-clock budget and was killed."""

    def __init__(self, message: str, elapsed_s: float, stage: str = ""):
        super().__init__(message, stage=stage)
        self.elapsed_s = elapsed_s


class ToolEnvironmentError(EdaLoopError):
    """A required executable, file, or directory is not usable."""


class PreconditionError(EdaLoopError):
    """An operation was invoked with inputs that violate its contract."""


class AdvisorError(EdaLoopError):
    """The proposal source failed to produce a usable candidate."""


class ExtractionError(AdvisorError):
    """No command sequence could be extracted from a model response."""

    def __init__(self, message: str, response: str = ""):
        super().__init__(message)
        self.response = response


class ProposalsExhaustedError(AdvisorError):
    """Every candidate the proposer can produce has already been tried."""


class ConfigurationError(EdaLoopError):
    """Bad or missing configuration (files, credentials, option combos)."""


class HistoryError(EdaLoopError):
    """A persisted optimization history is corrupt or inconsistent."""
