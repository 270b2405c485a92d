"""Exception types shared across the package."""


class DeduplicatorError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(DeduplicatorError, ValueError):
    """A deployment or algorithm parameter is out of bounds."""


class InputError(DeduplicatorError, ValueError):
    """A request or argument is malformed (wrong dimension, out-of-range bucket, ...)."""


class InvalidAdjustment(DeduplicatorError, ValueError):
    """A slice edit would break the partition or leave a slice below ``min_slice``."""


class RegistrationRequired(DeduplicatorError, KeyError):
    """A message referenced a server the receiver does not know."""


class NoLiveServers(DeduplicatorError, RuntimeError):
    """Routing was attempted with an empty deployment."""


class BackendTimeout(DeduplicatorError, TimeoutError):
    """An edge server did not answer in time."""
