"""Exception hierarchy.

``ValidationError`` and its subclasses signal bad input (CLI exit code 1);
everything else deriving from ``FedKFError`` is a runtime failure (exit code 2).
"""


class FedKFError(Exception):
    """Base class for all package errors."""


class ValidationError(FedKFError, ValueError):
    """Invalid arguments, configuration, or data."""


class ConfigError(ValidationError):
    """Malformed or unknown configuration entries."""


class PartitionError(ValidationError):
    """A dataset cannot be partitioned as requested."""


class SplitError(ValidationError):
    """A shard is too small to split into train and test sets."""


class ShapeError(ValidationError):
    """Input tensors do not match an architecture."""


class ProtocolError(FedKFError):
    """A client/server exchange violates the round protocol."""


class DataUnavailableError(FedKFError):
    """A dataset archive is missing from the local data directory."""


class NonFiniteLossError(FedKFError):
    """A local training loss became NaN or infinite."""
