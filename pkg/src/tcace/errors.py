"""Exception types.

Input/config problems derive from :class:`InputError` (CLI exit code 2);
numerical and estimation failures derive from :class:`EstimationError`
(CLI exit code 3).
"""

from __future__ import annotations


class TCACEError(Exception):
    """Base class for every error raised by the package."""


class InputError(TCACEError, ValueError):
    pass


class EstimationError(TCACEError, ArithmeticError):
    pass


class EmptyInput(InputError):
    pass


class MissingColumn(InputError):
    def __init__(self, column: str, row: int | None = None, detail: str = ""):
        self.column = column
        self.row = row
        where = f"column {column!r}" if row is None else f"row {row}, column {column!r}"
        super().__init__(f"MissingColumn: {where}{': ' + detail if detail else ''}")


class UnexpectedOutcomeOnTarget(InputError):
    def __init__(self, row: int, column: str = "y"):
        self.row = row
        self.column = column
        super().__init__(
            f"UnexpectedOutcomeOnTarget: row {row}, column {column!r} must be empty on target rows"
        )


class NonBinaryIndicator(InputError):
    def __init__(self, row: int, column: str, value: object):
        self.row = row
        self.column = column
        super().__init__(f"NonBinaryIndicator: row {row}, column {column!r} has value {value!r}")


class NonFiniteValue(InputError):
    def __init__(self, row: int, column: str, value: object = None):
        self.row = row
        self.column = column
        super().__init__(f"NonFiniteValue: row {row}, column {column!r} has value {value!r}")


class EmptyArm(InputError):
    def __init__(self, detail: str = "study sample needs at least one z=1 and one z=0 unit"):
        super().__init__(f"EmptyArm: {detail}")


class DimensionMismatch(InputError):
    pass


class ConfigError(InputError):
    pass


class MissingTargetAssignment(InputError):
    pass


class NoProxyData(InputError):
    pass


class Separation(EstimationError):
    pass


class SingularHessian(EstimationError):
    pass


class NotConverged(EstimationError):
    pass


class RankDeficient(EstimationError):
    pass


class InsufficientStratum(EstimationError):
    pass


class WeakFirstStage(EstimationError):
    pass


class NoTargetCompliance(EstimationError):
    pass


class DegenerateDenominator(EstimationError):
    pass


class SingularBread(EstimationError):
    pass


class DegenerateResample(EstimationError):
    pass


class FirstStageSignViolation(EstimationError):
    pass


class NotFound(EstimationError):
    pass


class DegenerateTrial(EstimationError):
    pass


class NoTargetCompliers(EstimationError):
    pass


class StudyFailed(EstimationError):
    pass


class OverlapViolation(UserWarning):
    """Warning: a selection probability was clamped while building weights."""
