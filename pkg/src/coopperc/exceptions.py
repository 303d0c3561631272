"""Exception hierarchy shared by all modules."""


class CoopPercError(Exception):
    """Base class for errors raised by coopperc."""


class DomainError(CoopPercError, ValueError):
    """An argument lies outside the domain of the formula or operation."""


class NumericError(CoopPercError, ArithmeticError):
    """A numerical routine failed (bracketing, convergence, rank)."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConfigError(CoopPercError, ValueError):
    """Invalid simulation or pipeline configuration."""


class ContractError(CoopPercError, ValueError):
    """Input violates a structural precondition (e.g. unsorted positions)."""


class EmptySampleError(CoopPercError, ValueError):
    """Nothing left to summarise after filtering."""


class SampleSizeError(CoopPercError, ValueError):
    """Too few observations for the requested statistic."""


class IngestionError(CoopPercError, ValueError):
    """A CSV source could not be parsed.

    ``line`` is the 1-based physical line number when known.
    """

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.column = column
