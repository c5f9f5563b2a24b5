"""Exception hierarchy shared by every psem module."""


class PsemError(Exception):
    """Base class for all library errors."""


class ParseError(PsemError):
    def __init__(self, row, col, message=""):
        self.row = row
        self.col = col
        detail = f": {message}" if message else ""
        super().__init__(f"cannot parse cell (row={row}, col={col}){detail}")


class EmptyAfterCleaning(PsemError):
    pass


class TooFewRows(PsemError):
    pass


class OutOfRange(PsemError):
    pass


class InvalidParameter(PsemError, ValueError):
    pass


class NonFiniteInput(PsemError, ValueError):
    pass


class NonFiniteGradient(PsemError, FloatingPointError):
    """Backpropagation produced inf/nan; usually the learning rate is too large."""


class DivergedTraining(PsemError):
    pass


class DegenerateColumn(PsemError):
    pass


class SingularSystem(PsemError):
    pass


class ShapeMismatch(PsemError, ValueError):
    pass


class InsufficientCandidates(PsemError):
    pass


class NonPositiveMSE(PsemError, ValueError):
    pass


class ZeroVolColumn(PsemError):
    pass


class SolverFailed(PsemError):
    pass


class DegenerateCorrelation(PsemError):
    pass


class ZeroVolatility(PsemError):
    pass
