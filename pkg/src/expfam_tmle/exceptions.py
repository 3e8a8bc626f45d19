"""Exception and warning classes raised across the package."""


class TMLEError(Exception):
    """Base class for estimation failures."""


class PositivityError(TMLEError, ValueError):
    """A probability or density that must be positive is zero at an observed point."""


class NumericalError(TMLEError, ArithmeticError):
    """An objective or likelihood became non-finite and could not be recovered."""


class BracketError(TMLEError, ValueError):
    """The supplied interval does not bracket a sign change."""


class QuadratureError(TMLEError, ArithmeticError):
    """A conditional density failed its normalization self-check."""


class DataValidationError(TMLEError, ValueError):
    """Input data violate the schema of the estimation problem."""


class SeparationWarning(UserWarning):
    """Logistic coefficients diverged (complete or quasi-complete separation)."""


class BoundaryWarning(UserWarning):
    """A grid-search minimizer landed on the boundary of the search box."""


class CellUnreliableWarning(UserWarning):
    """More than 5% of replicates failed in a simulation cell."""
