"""Exception taxonomy shared across the package.

CLI exit codes: usage errors map to 2, data/format/config errors to 3,
numeric failures to 4 (see cli.main).
"""


class PegrlError(Exception):
    """Base class for all package errors."""


class DimensionError(PegrlError):
    """Array shape mismatch; message names the offending axis."""


class WindowError(PegrlError):
    """Observation window has the wrong length or straddles episodes."""


class NumericError(PegrlError):
    """Non-finite value encountered at an operation boundary."""


class FormatError(PegrlError):
    """Malformed binary file (bad magic, version, or truncation)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(PegrlError):
    """Invalid or inconsistent run configuration."""


class UsageError(PegrlError):
    """Operation invoked in an invalid order or with invalid arguments."""


class DegenerateConfigError(PegrlError):
    """Configuration makes a formula degenerate (e.g. zero divisor)."""


class TrainingDiverged(PegrlError):
    """Loss became non-finite; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
