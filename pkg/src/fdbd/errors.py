"""Exception hierarchy shared by every fdbd module."""

from __future__ import annotations


class FdbdError(Exception):
    """Base class for all errors raised by this package."""


# --- array files and manifests -------------------------------------------


class FormatError(FdbdError, ValueError):
    """An array file does not conform to the supported NPY subset."""


class MagicMismatch(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class UnsupportedLayout(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class ValidationError(FdbdError, ValueError):
    """Array contents violate an invariant (e.g. non-finite values)."""


class MissingRole(FdbdError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class DimensionMismatch(FdbdError, ValueError):
    pass


# --- geometry ------------------------------------------------------------


class DegenerateHead(FdbdError, ValueError):
    """Two classes share an identical weight row."""


class RegionEmpty(FdbdError):
    """The decision region of the requested class has no interior."""


class NoConvergence(FdbdError):
    """An iterative solver hit its iteration cap."""


# --- scoring -------------------------------------------------------------


class MissingClass(FdbdError, ValueError):
    pass


class DegenerateCovariance(FdbdError, ValueError):
    pass


class NonPositiveS2(FdbdError, ValueError):
    """Sum of the kept top-k activations is not positive."""


class ZeroDeviation(FdbdError, ValueError):
    """Feature coincides with the training mean; regularized score undefined."""


class BadK(FdbdError, ValueError):
    pass


class MissingStats(FdbdError, ValueError):
    """A method or shaping mode needs fitted training statistics."""


# --- metrics / synthetic / cli -------------------------------------------


class EmptyInput(FdbdError, ValueError):
    pass


class BadDims(FdbdError, ValueError):
    pass


class PreconditionError(FdbdError, ValueError):
    pass


class InsufficientRegionMass(FdbdError):
    def __init__(self, message: str, volumes: dict[str, float] | None = None):
        super().__init__(message)
        self.volumes = volumes or {}


class ColumnMismatch(FdbdError, ValueError):
    pass


class UsageError(FdbdError):
    pass
