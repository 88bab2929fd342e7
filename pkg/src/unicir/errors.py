"""Exception hierarchy shared across the toolkit.

Each error class carries the CLI exit code it maps to, so the command-line
front end can translate failures uniformly.
"""


class UnicirError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(UnicirError):
    """Bad or inconsistent run configuration."""

    exit_code = 2


class ManifestParseError(ConfigError):
    """A manifest or native dataset file could not be parsed."""


class ValidationError(ConfigError):
    """A record or value violates its declared invariants."""


class PreprocessingIncompleteError(UnicirError):
    """A required cache entry or artifact is missing."""

    exit_code = 3


class ServiceError(UnicirError):
    """An external captioning/extraction service failed after retries."""

    exit_code = 4


class DeterminismError(UnicirError):
    """Replay-mode cache miss or stale entry: the run cannot be reproduced."""

    exit_code = 5


class ResponseParseError(UnicirError):
    """A service response could not be parsed into the expected shape."""


class ShapeError(UnicirError):
    """Embedding or parameter dimensions do not line up."""


class NumericDomainError(UnicirError):
    """An input is outside the mathematical domain (e.g. zero-norm vector)."""


class ProtocolError(UnicirError):
    """An evaluation protocol precondition is violated."""


class RenderOverflowError(UnicirError):
    """Keyword text cannot fit the image at the minimum glyph size."""


class BackendError(UnicirError):
    """An encoder backend is unavailable or failed to run."""


class CheckpointError(UnicirError):
    """Base for checkpoint load/save failures."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated or structurally invalid."""


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint version or shape does not match the current configuration."""
