"""Exception hierarchy shared by every module.

The CLI maps these onto distinct exit codes, so raise the most specific
class that applies.
"""
from __future__ import annotations


class MetaSSMError(Exception):
    """Base class for all package errors."""


class DimensionError(MetaSSMError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MetaSSMError, ValueError):
    """A precondition on an argument was violated (e.g. non-scalar loss)."""


class UsageError(MetaSSMError, RuntimeError):
    """An API was called in an invalid order or with an invalid request."""


class DomainError(MetaSSMError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class NumericError(MetaSSMError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class InstabilityError(NumericError):
    """An SDE integration diverged."""


class UnknownDatasetError(MetaSSMError, KeyError):
    """A dataset id is not registered with the model."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown dataset"


class ConfigError(MetaSSMError, ValueError):
    """An experiment or generator config is malformed.

    ``field`` names the offending entry as a dotted path.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class FormatError(MetaSSMError, OSError):
    """A checkpoint or dataset file is corrupt or has an unknown layout."""


class InvariantViolation(MetaSSMError, AssertionError):
    """An internal invariant was broken (e.g. a frozen parameter changed)."""
