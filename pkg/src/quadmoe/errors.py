"""Exception hierarchy shared by every module."""


class QuadMoEError(Exception):
    """Base class for library errors."""


class InvalidArgument(QuadMoEError, ValueError):
    """Shapes, ranges or enum values that violate an operation's preconditions."""


class UnsupportedCellSize(InvalidArgument):
    """An exact r-bar value was required for a Voronoi cell of unknown order."""

    def __init__(self, cell_size):
        self.cell_size = cell_size
        super().__init__(
            f"rbar({cell_size}) is only known as a lower bound (>= 7); "
            "an exact exponent is required for this cell"
        )


class NumericalFailure(QuadMoEError, ArithmeticError):
    """Overflow or a non-finite value where a finite one was required."""


class DivergenceError(NumericalFailure):
    """Gradient descent produced a non-finite loss."""

    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")
