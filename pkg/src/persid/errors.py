"""Exception hierarchy.

Every error raised deliberately by the package derives from
:class:`PersidError`, so callers can catch the whole family at once.
"""


class PersidError(Exception):
    """Base class for package errors."""


class ConfigError(PersidError, ValueError):
    """Malformed or unreadable scenario / parameter document."""


class SplitInfeasible(PersidError, ValueError):
    pass


class SplitViolation(PersidError, ValueError):
    """Train and test policies overlap."""


class HeterogeneousDataset(PersidError, ValueError):
    pass


class OutOfBounds(PersidError, ValueError):
    """A perturbation value lies outside the admissible input box."""


class RequiresFeedback(PersidError, ValueError):
    """An adaptive policy was asked for an open-loop sequence."""


class InvalidHorizon(PersidError, ValueError):
    pass


class DimensionMismatch(PersidError, ValueError):
    pass


class NotPSD(PersidError, ValueError):
    pass


class NumericalFailure(PersidError, ArithmeticError):
    pass


class EmptyDataset(PersidError, ValueError):
    pass


class MonotonicityViolation(PersidError, RuntimeError):
    """EM log-likelihood decreased: always a bug, never a data condition."""


class InvalidSymbol(PersidError, ValueError):
    pass


class ExhaustiveInfeasible(PersidError, ValueError):
    pass


class EmptySample(PersidError, ValueError):
    pass


class SupportMismatch(PersidError, ValueError):
    pass


class SingletonGroups(PersidError, ValueError):
    pass


class InsufficientReplicates(PersidError, ValueError):
    pass


class CalibrationUnnecessary(PersidError, ValueError):
    pass


class VacuousInf(PersidError, ValueError):
    pass


class BudgetExceedsPool(PersidError, ValueError):
    pass


class PipelineError(PersidError):
    """A pipeline stage failed; ``stage`` names where."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
