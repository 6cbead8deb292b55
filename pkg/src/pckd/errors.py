"""Exception hierarchy shared across the toolkit."""


class PckdError(Exception):
    """Base class for all toolkit errors."""


class ContractViolation(PckdError):
    """An argument violates a documented precondition (shape, range, dtype)."""


class NumericError(PckdError):
    """Non-finite values or numerically undefined operations (zero-norm rows)."""


class DegenerateBatchError(PckdError):
    """A batch statistic needed for normalization is degenerate (e.g. all-zero CE)."""


class IngestionError(PckdError):
    """A dataset file is missing or does not match the documented binary layout."""


class UnsupportedArchitectureError(PckdError):
    """The model does not expose the structure an operation requires."""


class ConfigError(PckdError):
    """An experiment configuration fails schema validation."""
