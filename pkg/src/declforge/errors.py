"""Exception types shared across the package."""


class DeclforgeError(Exception):
    """Base class for all package errors."""


class ConfigError(DeclforgeError):
    """Invalid configuration: bad shapes, bad task parameters, bad config files."""


class UsageError(DeclforgeError):
    """An operation was called in a state or with arguments it does not accept."""


class CheckpointError(DeclforgeError):
    """A checkpoint could not be written or read.

    ``field`` names the part of the file (or the network attribute) that failed.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NonFiniteError(DeclforgeError):
    """NaN or Inf reached a gradient, loss or parameter."""
