"""Exception hierarchy shared across the package."""


class PsnnError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PsnnError, ValueError):
    """Invalid configuration or mismatched dimensions."""


class ContractViolation(PsnnError, ValueError):
    """A documented precondition of an operation was not met."""


class NumericalDomainError(PsnnError, ArithmeticError):
    """Input outside the domain of a formula, or a non-finite result."""


class DivergedTrainingError(PsnnError, RuntimeError):
    """Training produced a non-finite loss or update."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ParseError(PsnnError, ValueError):
    """Malformed observation file or checkpoint."""


class MissingInputError(PsnnError, FileNotFoundError):
    """A file an operation depends on does not exist yet."""
