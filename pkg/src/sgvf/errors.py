"""Exception hierarchy shared by every module."""


class SGVFError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SGVFError, ValueError):
    pass


class ShapeError(SGVFError, ValueError):
    pass


class InputError(SGVFError, ValueError):
    pass


class DomainError(SGVFError, ValueError):
    pass


class NumericError(SGVFError, ArithmeticError):
    pass


class StateError(SGVFError, RuntimeError):
    pass


class StatisticsError(SGVFError, ValueError):
    pass


class DegenerateGeometryError(SGVFError, ValueError):
    pass


class TrainingError(SGVFError, RuntimeError):
    """Non-finite loss or gradient during optimisation.

    ``iteration`` is the zero-based iteration index when known, ``terms``
    an optional mapping of loss-term values at the failing step.
    """

    def __init__(self, message, iteration=None, terms=None):
        super().__init__(message)
        self.iteration = iteration
        self.terms = dict(terms) if terms else {}


class FormatError(SGVFError, ValueError):
    """Malformed file. ``offset`` is a byte offset (binary) or line number (text)."""

    def __init__(self, message, offset=None, line=None):
        where = ""
        if offset is not None:
            where = f" (byte offset {offset})"
        elif line is not None:
            where = f" (line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line
