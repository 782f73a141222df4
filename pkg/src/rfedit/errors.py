"""Exception types shared across the package.

Kept in one place so the CLI can map error categories to distinct exit codes.
"""


class RFEditError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(RFEditError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class NonFiniteError(RFEditError, ValueError):
    """A NaN or Inf appeared where only finite values are allowed."""

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class GridMismatchError(RFEditError, ValueError):
    """Sampling time grid does not match the grid a cache was recorded on."""


class MissingCacheEntryError(RFEditError, KeyError):
    """An injection site has no matching record in the KV cache."""


class CacheFrozenError(RFEditError, RuntimeError):
    """Attempted to write to a KV cache after it was frozen."""


class NoEditTokensError(RFEditError, ValueError):
    """Source and target prompts are identical and no override was given."""


class DegenerateMaskError(RFEditError, ValueError):
    """Attention relevance produced an empty mask; supply an override mask."""


class ControllerShapeError(RFEditError, ValueError):
    """A controller returned tensors whose shape does not match the site."""


class CheckpointError(RFEditError, ValueError):
    """Checkpoint file is missing, corrupt, or has an unsupported version."""


class ConfigError(RFEditError, ValueError):
    """A run configuration is malformed or contains unknown keys."""
