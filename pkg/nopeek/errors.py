"""Exceptions shared by every nopeek module."""

from typing import Optional


class RejectedInputError(ValueError):
    """Raised when an operation's precondition is violated by its arguments."""

    pass


class EmptyGridError(RejectedInputError):
    """Raised when no box satisfies the grid's placement constraints."""

    pass


class EmptyManifestError(RejectedInputError):
    """Raised when a manifest or image directory yields no usable images."""

    pass


class CorruptCheckpointError(ValueError):
    """
    Raised when a checkpoint file cannot be decoded.

    @param field: name of the offending part of the file (magic, version, config,
                  blob name, crc, ...)
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"corrupt checkpoint ({field}): {message}")
        self.field = field


class TrainingDivergedError(ArithmeticError):
    """
    Raised when training produces a non-finite loss or gradient.

    @param epoch: zero-based epoch in which the divergence was detected, if known
    """

    def __init__(self, message: str, epoch: Optional[int] = None):
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
        self.epoch = epoch


class ConfigError(ValueError):
    """
    Raised when a run configuration fails validation.

    @param key: dotted path of the offending configuration key
    """

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class MissingArtifactError(FileNotFoundError):
    """Raised when a command needs the output of a stage that has not run."""

    def __init__(self, path: str, stage: str):
        super().__init__(f"missing artifact {path} (run '{stage}' first)")
        self.path = path
        self.stage = stage
