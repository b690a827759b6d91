"""Exception types shared across the package."""


class IsacError(Exception):
    """Base class for package errors."""


class ConfigError(IsacError, ValueError):
    """Invalid or inconsistent configuration."""


class GeometryError(IsacError, ValueError):
    """Geometric quantity undefined for the given points."""


class SizeGuardError(IsacError, ValueError):
    """Exact-enumeration routine called beyond its size guard."""


class NumericsError(IsacError, ArithmeticError):
    """A numeric guard tripped (nonpositive precision, non-finite value)."""
