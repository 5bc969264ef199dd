"""
Error types for the dual-head model.

Every error raised by the mechanism derives from HydraError so that the
management commands can turn it into a clean exit code.
"""


class HydraError(Exception):
    """Base class for all dual-head errors."""


class DimensionError(HydraError, ValueError):
    """Tensor extents do not line up."""


class NonFiniteError(HydraError, ArithmeticError):
    """An operation produced NaN or +Inf."""


class DegenerateRowError(HydraError, ValueError):
    """A row is too close to zero to normalize."""


class MaskError(HydraError, ValueError):
    """Attention mask is unusable (wrong kind, or a row with no valid target)."""


class CacheError(HydraError):
    """KV-cache state disagrees with the sequence being decoded."""


class SequenceLengthError(HydraError, ValueError):
    """Input is longer than the model's max_seq_len."""


class IntegrityError(HydraError):
    """A digest is missing or does not match."""


class ConfigError(HydraError, ValueError):
    """Configuration value violates an invariant."""


class ModeSwitchError(HydraError):
    """Mode switch requested while a forward pass is in flight."""


class TrainingDivergedError(HydraError):
    """Loss became non-finite during training."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class EmptyIndexError(HydraError, ValueError):
    """Search against an index with no entries."""


class DuplicateDocumentError(HydraError, ValueError):
    """doc_id already present in the index."""


class FormatError(HydraError, ValueError):
    """Binary file has the wrong magic, version or layout."""


class CheckpointError(HydraError):
    """Checkpoint bundle is missing or corrupt."""


class InvalidInputError(HydraError, ValueError):
    """A value-level precondition failed (empty batch, k < 1, empty gold list, ...)."""
