from typing import Optional

from pydantic import BaseModel


class DosepoolError(Exception):
    """Base class for every error raised by dosepool"""


class SchemaError(DosepoolError, ValueError):
    """Input data does not match the expected schema"""

    def __init__(self, detail: str, row: Optional[int] = None, column: Optional[str] = None):
        self.detail = detail
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(f"{prefix}{detail}")


class OutOfSupportError(DosepoolError, ValueError):
    """Prior evaluated outside its support"""


class SpecificationError(DosepoolError, ValueError):
    """Model specification is inconsistent with the data or its priors"""


class SingularInformationError(DosepoolError, ArithmeticError):
    """Gradient matrix of the Emax model is rank deficient on the dose grid"""


class NonFiniteError(DosepoolError, ArithmeticError):
    """A log-density term evaluated to NaN or infinity"""


class InitializationFailure(DosepoolError, RuntimeError):
    """No finite starting point found for a chain"""


class AdaptationFailure(DosepoolError, RuntimeError):
    """Step size collapsed during warmup"""


class InsufficientDrawsError(DosepoolError, ValueError):
    """Not enough draws or chains for the requested statistic"""


class TooFewDosesError(DosepoolError, ValueError):
    """Fewer distinct dose levels than model parameters"""


class FitFailure(DosepoolError, RuntimeError):
    """A fit inside a batch (comparison, simulation replication) failed"""


class BoundaryEstimateWarning(UserWarning):
    """MLE of ED50 sits on a bound of the search interval"""


class ConvergenceWarning(UserWarning):
    """R-hat above threshold or divergent transitions after warmup"""


class ParetoKWarning(UserWarning):
    """Pareto k diagnostic above threshold"""


class DegenerateWeightsWarning(UserWarning):
    """All importance ratios equal; LOO reduces to the mean log-likelihood"""


class MissingPlaceboWarning(UserWarning):
    """Design has no placebo arm to anchor E0"""


class ErrorResponse(BaseModel):
    error: str
    detail: Optional[str] = None
    exit_code: int = 2
