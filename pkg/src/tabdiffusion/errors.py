"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: usage/config problems exit 1, data
problems exit 2, numerical failures exit 3.
"""


class DiffusionError(Exception):
    """Base class for package errors."""


class ContractError(DiffusionError, ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Array shapes are incompatible."""


class ConfigError(DiffusionError, ValueError):
    """Invalid configuration value or unknown key."""


class DataError(DiffusionError, ValueError):
    """Malformed input data (CSV parse failures, bad checkpoints)."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt, truncated, or of an unknown version."""


class NumericalError(DiffusionError, ArithmeticError):
    """A computation produced non-finite values."""

    def __init__(self, message: str, step: int | None = None, seed=None):
        super().__init__(message)
        self.step = step
        self.seed = seed
