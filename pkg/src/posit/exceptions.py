"""Exception types raised across the package."""


class PositError(Exception):
    """Base class for every error raised by this package."""


class ParseError(PositError, ValueError):
    pass


class EmptyDatasetError(PositError, ValueError):
    pass


class SplitError(PositError, ValueError):
    pass


class ShapeError(PositError, ValueError):
    pass


class SingularityError(PositError, ArithmeticError):
    pass


class DivergenceError(PositError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


class DegenerateAdversaryError(PositError, ArithmeticError):
    pass


class MetricError(PositError, ValueError):
    pass


class ConfigError(PositError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
