"""Exception types raised across the package."""


class GalqrError(Exception):
    """Base class; the CLI maps these to machine-readable error JSON."""

    code = "error"


class InvalidParams(GalqrError, ValueError):
    code = "invalid-params"


class QuadratureError(GalqrError, RuntimeError):
    code = "quadrature-failure"


class DimensionMismatch(GalqrError, ValueError):
    code = "dimension-mismatch"


class InvalidState(GalqrError, ValueError):
    code = "invalid-state"


class InsufficientDraws(GalqrError, ValueError):
    code = "insufficient-draws"


class DegenerateDraws(GalqrError, ValueError):
    code = "degenerate-draws"


class WrongLink(GalqrError, ValueError):
    code = "wrong-link"


class ConfigError(GalqrError, ValueError):
    code = "config-error"


class DataError(GalqrError, ValueError):
    code = "data-error"
