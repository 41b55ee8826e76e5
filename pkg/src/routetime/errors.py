"""Exception types shared across the package."""


class RouteTimeError(Exception):
    """Base class for all package errors."""


class ShapeError(RouteTimeError):
    """Tensor dimensions are inconsistent with the requested operation."""


class DegenerateInputError(RouteTimeError):
    """Input is structurally empty (e.g. every position masked)."""


class ContractError(RouteTimeError):
    """A documented precondition was violated by the caller."""


class NumericError(RouteTimeError):
    """A non-finite value appeared where finite math is required."""


class ParseError(RouteTimeError):
    """A file could not be read in its documented format."""


class ValidationError(RouteTimeError):
    """Parsed data violates a record-level invariant."""


class ConfigError(RouteTimeError):
    """A configuration value is missing or out of range."""
