"""Exception hierarchy for the simulator."""


class HetflError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(HetflError, ValueError):
    """Invalid population, schedule or configuration value."""


class WeightSumError(ValidationError):
    pass


class BadSchedule(ValidationError):
    pass


class DuplicateId(ValidationError):
    pass


class NonContractive(ValidationError):
    pass


class DegenerateLink(ValidationError):
    pass


class AllZeroGradients(ValidationError):
    pass


class Infeasible(ValidationError):
    pass


class WrongShape(ValidationError):
    pass


class UnknownPreset(HetflError, KeyError):
    pass


class ParseError(HetflError):
    pass


class NumericalBlowup(HetflError, ArithmeticError):
    """An iterate became non-finite or exceeded the configured norm guard."""
