"""Exception types shared across the package."""


class CMCError(Exception):
    """Base class for package errors."""


class ShapeError(CMCError, ValueError):
    pass


class StateError(CMCError, RuntimeError):
    pass


class NumericError(CMCError, FloatingPointError):
    pass


class DeficitTooLarge(CMCError, ValueError):
    pass


class EmptyClass(CMCError, ValueError):
    pass


class TooFewPoints(CMCError, ValueError):
    pass


class SplitError(CMCError, ValueError):
    pass


class UndefinedMetric(CMCError, ValueError):
    pass


class FormatError(CMCError, ValueError):
    """Malformed container file or CSV input."""
