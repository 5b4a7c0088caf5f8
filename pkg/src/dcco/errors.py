"""Exception hierarchy shared across the simulator."""


class DCCOError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(DCCOError, ValueError):
    pass


class UnboundInput(DCCOError, KeyError):
    pass


class NonScalarLoss(DCCOError, ValueError):
    pass


class NumericError(DCCOError, ArithmeticError):
    """A NaN or infinity appeared during a forward or backward pass."""


class InvalidConfig(DCCOError, ValueError):
    """Raised for bad configuration values. ``field`` names the offender."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class IndivisibleWidth(InvalidConfig):
    pass


class DegenerateVariance(NumericError):
    pass


class DimensionTooSmall(DCCOError, ValueError):
    pass


class DimensionMismatch(DCCOError, ValueError):
    pass


class EmptyList(DCCOError, ValueError):
    pass


class BatchTooSmall(DCCOError, ValueError):
    pass


class KTooLarge(DCCOError, ValueError):
    pass


class EmptyRound(DCCOError, RuntimeError):
    pass


class InsufficientSamples(DCCOError, ValueError):
    pass


class StepOutOfRange(DCCOError, ValueError):
    pass


class ParseError(DCCOError, ValueError):
    """Malformed input file. ``location`` is a line/offset/cell description."""

    def __init__(self, message: str, location: str | None = None):
        if location:
            message = f"{location}: {message}"
        super().__init__(message)
        self.location = location
