"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shapes do not line up for the requested operation."""


class ConfigError(ValueError):
    """Invalid hyperparameters or configuration file contents."""


class StructureError(ValueError):
    """Malformed speculation tree (bad parent indices, empty tree)."""


class ContractError(RuntimeError):
    """An internal precondition was violated (stale cache, partial fold, ...)."""


class InputError(ValueError):
    """Bad token ids or sequence lengths handed to the model."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class TrainingError(RuntimeError):
    """Training diverged. ``diagnostics`` carries the last recorded state."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConsistencyError(RuntimeError):
    """Two computations that must agree did not."""
