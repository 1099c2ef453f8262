"""Typed error hierarchy shared across the package.

Every error carries a human-readable message naming the offending value;
the CLI maps each family to a distinct exit code.
"""


class Di3clError(Exception):
    """Base class for all package errors."""


class ConfigError(Di3clError):
    """A configuration value is missing, malformed, or out of range."""


class GeometryError(Di3clError):
    """A box or view transform violates its coordinate-frame contract."""


class DegenerateRegionError(GeometryError):
    """A sampling region is too small to draw boxes from."""


class DataError(Di3clError):
    """Dataset content is missing, unreadable, or inconsistent."""


class NotReadyError(Di3clError):
    """A component was queried before it holds any usable state."""


class CapacityError(Di3clError):
    """A single write exceeds the fixed capacity of a buffer."""


class DivergenceError(Di3clError):
    """Training produced a non-finite loss value."""
