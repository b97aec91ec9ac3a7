"""Exception types shared across the package."""


class ContpceError(Exception):
    """Base class for all package errors."""


class DataError(ContpceError):
    """Malformed or inconsistent input data."""


class FitError(ContpceError):
    """Nuisance model fitting failed."""


class QuadratureError(ContpceError):
    """Numerical integration failed or exhausted its budget."""


class EstimationError(ContpceError):
    """Point estimation failed (e.g. negligible stratum density)."""


class ConfigError(ContpceError):
    """Invalid configuration values."""
