"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration/contract problems exit 1,
numeric aborts exit 2.
"""


class MIPLError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MIPLError, ValueError):
    """Invalid hyperparameters, generator settings or mode requirements."""


class ContractError(MIPLError, ValueError):
    """An operation was called outside its documented preconditions."""


class DimensionError(ContractError):
    """Operand shapes do not chain."""


class DomainError(ContractError, ArithmeticError):
    """An elementwise function received an argument outside its domain."""


class SchemaError(MIPLError, ValueError):
    """A dataset or checkpoint does not conform to its declared schema."""


class ParseError(SchemaError):
    """A serialized line could not be decoded."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericAbort(MIPLError, FloatingPointError):
    """Training produced a non-finite or degenerate quantity."""
