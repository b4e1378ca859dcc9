"""Error types shared across the package.

The split mirrors how callers are expected to react: configuration and
input-file problems are user-fixable (CLI exit code 1), contract violations
are programming errors (exit code 2).
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of the operation."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ContractError(RuntimeError):
    """An internal precondition was violated by the caller."""


class ParseError(ValueError):
    """Malformed input file content."""


class ValidationError(ValueError):
    """Input data failed a declared consistency check."""
