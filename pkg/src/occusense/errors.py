"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific class that applies.
"""


class OccusenseError(Exception):
    """Base class for all package errors."""


class ConfigError(OccusenseError):
    """Invalid configuration value or inconsistent parameter combination."""


class DataError(OccusenseError):
    """Malformed, mismatched, or missing input data."""


class NoSignalError(DataError):
    """An operation that needs a signal peak received silence."""


class NumericalFault(OccusenseError):
    """Non-finite values appeared where finite math was required."""


class ContractViolation(OccusenseError):
    """A caller-side precondition was violated (e.g. unclipped row in reject mode)."""
