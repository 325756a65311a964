"""Parameter-solution neural networks for locating steady states of parameterized systems."""

from .errors import (
    ConfigurationError,
    ContractViolation,
    DivergedTrainingError,
    MissingInputError,
    NumericalDomainError,
    ParseError,
    PsnnError,
)

__version__ = "0.1.0"
