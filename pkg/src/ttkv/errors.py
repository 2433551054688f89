"""Exception types raised across the package."""


class TTKVError(Exception):
    """Base class for all errors raised by ttkv."""


class ConfigError(TTKVError, ValueError):
    """Invalid or inconsistent configuration."""


class SequencingError(TTKVError, ValueError):
    """A token was appended out of order or twice."""


class IntegrityError(TTKVError, ValueError):
    """A packed block payload is malformed."""


class ShapeError(TTKVError, ValueError):
    """Array shapes do not agree."""


class SpecError(TTKVError, ValueError):
    """A workload specification cannot be realised."""


class UsageError(TTKVError, ValueError):
    """A harness entry point was called with unusable arguments."""
