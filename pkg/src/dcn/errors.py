"""Exception types shared across the package."""


class DcnError(Exception):
    """Base class for package-specific errors."""


class DataError(DcnError):
    """Malformed files, missing bands, incompatible dimensions or counts."""


class NumericError(DcnError):
    """Non-finite values where the contract demands finite ones."""
