"""Exception hierarchy shared by every splitfire module."""


class SplitFireError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SplitFireError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(SplitFireError):
    """A non-finite value (NaN/Inf) appeared where finite data is required."""


class ValidationError(SplitFireError):
    """An argument violates a documented contract (labels, indices, modes)."""


class DecodeError(SplitFireError):
    """A byte stream does not parse as a valid tensor or message frame."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(SplitFireError):
    """A well-formed message arrived out of sequence or with bad fields."""


class TransportError(SplitFireError):
    """The underlying carrier (socket, queue) failed or timed out."""


class ConfigError(SplitFireError):
    """An experiment configuration field is missing or invalid."""


class BuildError(SplitFireError):
    """A layer chain is not shape-compatible with its input."""
