"""Exception hierarchy.

Data-format problems (bad files, unknown tokens, shape mismatches) derive from
:class:`DataFormatError`; numeric degeneracies derive from
:class:`NumericDegeneracyError`. The CLI maps the two families to distinct exit
codes.
"""


class RewardLensError(Exception):
    """Base class for every error raised by the package."""


class DataFormatError(RewardLensError, ValueError):
    """Input data or a file on disk does not match the expected format."""


class ShapeMismatchError(DataFormatError):
    pass


class UnknownHeadKindError(DataFormatError):
    pass


class CorruptBlobError(DataFormatError):
    pass


class UnknownTokenError(DataFormatError):
    pass


class SequenceTooLongError(DataFormatError):
    pass


class SchemaMismatchError(DataFormatError):
    """Results with incompatible component schemas were combined."""


class NumericDegeneracyError(RewardLensError, ArithmeticError):
    """A statistic or geometric quantity is undefined for the given input."""


class DegenerateInputError(NumericDegeneracyError, ValueError):
    pass


class DegenerateStatisticError(NumericDegeneracyError, ValueError):
    def __init__(self, message, side=None):
        super().__init__(message)
        self.side = side


class IllConditionedError(NumericDegeneracyError):
    pass


class CorpusTooSmallError(RewardLensError, ValueError):
    pass


class TrainingDivergedError(NumericDegeneracyError):
    pass
