class ForensicsError(Exception):
    """Base class for errors raised by this package."""
