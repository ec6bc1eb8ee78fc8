class GeomatchError(Exception):
    """Base class for all library errors."""


class InvalidInputError(GeomatchError, ValueError):
    """Raised when an argument violates an operation's preconditions."""


class SolverError(GeomatchError, RuntimeError):
    """Raised when a linear solve or iterative inversion fails."""


class StateError(GeomatchError, RuntimeError):
    """Raised when an operation is called out of order (e.g. backward before forward)."""


class ConfigError(GeomatchError, ValueError):
    """Raised for inconsistent training or CLI configuration."""


class NonFiniteLossError(GeomatchError, FloatingPointError):
    """Raised when training produces a NaN or infinite loss."""
