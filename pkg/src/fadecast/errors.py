"""Exception types shared across the package.

Every domain error derives from FadecastError so CLI/service layers can map
them to exit code 1 / HTTP 400 uniformly.
"""


class FadecastError(Exception):
    """Base class for all fadecast domain errors."""


class IntegrationDivergedError(FadecastError):
    """Raised when the ODE integrator produced a non-finite state."""

    def __init__(self, t: float):
        self.t = t
        super().__init__(f"integration diverged: non-finite state at t={t:.6g}")


class OutOfRangeError(FadecastError):
    """A lookup time/cycle falls outside the simulated range."""


class FitFailedError(FadecastError):
    """Every restart of the curve fit failed to produce a result."""


class BankGenerationError(FadecastError):
    """Too many sampled parameter sets failed to simulate."""


class EmptyBankError(FadecastError):
    """Operation requires a non-empty curve bank."""


class CorruptBankError(FadecastError):
    """Bank file or bank/forecast cross-references are inconsistent."""


class ConfigError(FadecastError):
    """Shapes, dimensions or vocabularies do not chain consistently."""


class ContractError(FadecastError):
    """An input violated a documented precondition (e.g. non-unit norm)."""


class DegenerateEmbeddingError(FadecastError):
    """Embedding norm too small to normalize."""


class StaleCacheError(FadecastError):
    """Backward pass invoked with a forward cache from older weights."""


class DataValidationError(FadecastError):
    """Ingested records violate the schema or its invariants."""


class ParseError(DataValidationError):
    """CSV parse failure; message names the offending row/column."""
