"""Exception types shared across the package."""


class CsvolError(Exception):
    """Base class for all errors raised by this package."""


class CorruptStreamError(CsvolError):
    """An operation or entropy stream failed to decode; message names the position."""


class EncodabilityError(CsvolError):
    """A symbol cannot be entropy-coded under the given frequency table."""


class IngestionError(CsvolError):
    """Raw volume input does not match its declared metadata."""


class ConfigError(CsvolError):
    """Invalid configuration or unusable parameter combination."""


class CacheCapacityError(CsvolError):
    """A request set cannot fit the cache pool even after a rebuild."""
