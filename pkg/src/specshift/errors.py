"""Exception hierarchy. Every contract violation raises a named subclass of
:class:`SpecShiftError` so the CLI can report it by name."""


class SpecShiftError(Exception):
    pass


class ShapeError(SpecShiftError, ValueError):
    pass


class NumericError(SpecShiftError, ValueError):
    pass


class DomainError(SpecShiftError, ValueError):
    pass


class ConfigError(SpecShiftError, ValueError):
    pass


class DegenerateInput(SpecShiftError, ValueError):
    pass


class BaseModelMismatch(SpecShiftError):
    pass


class TapeError(SpecShiftError):
    pass


class FormatError(SpecShiftError):
    pass


class CorruptFile(FormatError):
    pass
