"""Exception hierarchy.

Data problems (bad files, mismatched ids, degenerate inputs) derive from
``DataError``; numerical breakdowns (diverged training, zero-variance
correlations) derive from ``NumericError``. The CLI maps the two families to
distinct exit codes.
"""


class DsgeomError(Exception):
    pass


class DataError(DsgeomError, ValueError):
    pass


class NumericError(DsgeomError, ArithmeticError):
    pass


class ParseError(DataError):
    pass


class MissingFieldError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class EmptyLibraryError(DataError):
    pass


class NonSquareError(DataError):
    pass


class IdMismatchError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class NoSharedClassesError(DataError):
    pass


class DegenerateCentroidError(DataError):
    pass


class ZeroVarianceError(NumericError):
    pass


class DivergedTrainingError(NumericError):
    pass
