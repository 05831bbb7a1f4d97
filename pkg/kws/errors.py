"""Exception types shared across the kws package.

Every failure the CLI can report derives from KwsError, which carries a
context mapping (saved verbatim in debug dumps) and the process exit code
the CLI should return for it.
"""

from typing import Any, Dict, Optional


class KwsError(Exception):
    """Base class for all kws failures."""

    exit_code = 2

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = context or {}


class UsageError(KwsError):
    """Bad command line or configuration."""

    exit_code = 1

    def __init__(
        self,
        message: str,
        usage: str = "",
        context: Optional[Dict[str, Any]] = None,
    ):
        super().__init__(message, context)
        self.usage = usage


class DataError(KwsError):
    """Input data (audio, corpus, model files, tensors) is unusable."""

    exit_code = 2


class NumericError(KwsError):
    """A computation produced a non-finite or otherwise invalid value."""

    exit_code = 3


class TensorError(DataError, ValueError):
    """Shape, kernel-size or stride precondition of a tensor op violated."""


class NonFiniteError(NumericError):
    """Parameters, activations or a loss contain NaN or infinity."""


class WavFormatError(DataError):
    """The file is not a 16-bit PCM mono RIFF/WAVE file we can read."""


class ContainerError(DataError):
    """A model or feature container could not be read back."""


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass
