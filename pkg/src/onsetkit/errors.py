"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage problems exit 1, data errors
(anything deriving from DataError) exit 2, numeric divergence exits 3.
"""


class OnsetKitError(Exception):
    """Base class for all toolkit errors."""


class DataError(OnsetKitError):
    """Bad input data: malformed files, out-of-range values, missing files."""


class AudioFormatError(DataError):
    """Unsupported or corrupt WAV encoding."""


class SampleRateError(DataError):
    """Sample rate differs from 44100 Hz and resampling was not requested."""


class EmptyInputError(DataError):
    """Zero-length audio or annotation input where content is required."""


class AnnotationError(DataError):
    """Malformed onset annotation file (with line number where known)."""


class ModelFormatError(DataError):
    """Corrupt, truncated, or version-incompatible model file."""


class ShapeError(OnsetKitError):
    """Operand shapes disagree with a layer or loss contract."""


class ConfigError(OnsetKitError):
    """Invalid configuration value (freeze segment, rates, empty corpus, ...)."""


class SnippetError(DataError):
    """The requested fine-tuning window contains no annotations."""


class DivergenceError(OnsetKitError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
