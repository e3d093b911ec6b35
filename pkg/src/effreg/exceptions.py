"""Exception types raised by effreg."""


class EffregError(Exception):
    """Base class for all effreg errors."""


class DomainError(EffregError, ValueError):
    """A parameter lies outside its admissible domain."""


class DimensionError(EffregError, ValueError):
    """Array shapes disagree with the mean model."""

    def __init__(self, message, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class PreconditionError(EffregError, ValueError):
    """Input violates an operation's precondition (sample size, spread...)."""


class SingularityError(EffregError, ArithmeticError):
    """A matrix that must be inverted is (numerically) singular.

    Carries whatever diagnostic the raising site has: the offending design
    column, a condition number or the eigenvalues.
    """

    def __init__(self, message, column=None, condition=None, eigenvalues=None):
        super().__init__(message)
        self.column = column
        self.condition = condition
        self.eigenvalues = eigenvalues


class ConvergenceError(EffregError, RuntimeError):
    """An iterative routine stopped without meeting its tolerance."""

    def __init__(self, message, bracket=None, last=None):
        super().__init__(message)
        self.bracket = bracket
        self.last = last
