"""Exception types shared across the package."""


class DownscaleError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(DownscaleError):
    """Invalid feature schema configuration."""


class DataError(DownscaleError):
    """Malformed or inconsistent coarse/individual data."""


class EstimationError(DownscaleError):
    """Model fitting failed (correlation, marginals or predictors)."""
