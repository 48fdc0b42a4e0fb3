"""
Prior log-density kernels and their derivatives.

All kernels are unnormalised: additive constants that depend only on the prior
parameters are dropped, consistently, so that HMC and PSIS-LOO see the same
fixed offset on every evaluation. For example the half-normal kernel is
``-v**2 / (2 s**2)``, which is 0 at the mode.

The functional-uniform approximation is a log-normal on ED50 / max_dose but
its kernel is written as a density over ED50 itself (it keeps the
``-log max_dose`` term), so a fit expressed on another reference scale sees
the same posterior surface.
"""

import logging
import math

import numpy as np

from ..core.errors import OutOfSupportError, SingularInformationError
from ..models.priors import (
    FlatPrior,
    FunctionalUniformApproxPrior,
    FunctionalUniformExactPrior,
    HalfNormalPrior,
    LogNormalPrior,
    NormalPrior,
    PriorSpec,
)
from ..models.schemas import EmaxParams
from .emax import emax_gradient

logger = logging.getLogger(__name__)

WIP_QUANTILE_SPAN = 3.92  # 2 * 1.96
SINGULAR_TOLERANCE = 1e-14
SUPPORT_SLACK = 1e-9  # rounding at the upper ED50 bound


def _require_max_dose(spec: FunctionalUniformApproxPrior) -> float:
    if spec.max_dose is None:
        raise ValueError("Functional uniform prior has no max_dose; resolve it against the trial first")
    return spec.max_dose


def _check_support(spec: PriorSpec, value: float) -> None:
    if not math.isfinite(value):
        raise OutOfSupportError(f"{spec.family} prior evaluated at non-finite value {value}")
    if isinstance(spec, HalfNormalPrior) and value < 0:
        raise OutOfSupportError(f"half-normal prior requires value >= 0, got {value}")
    if isinstance(spec, (LogNormalPrior, FunctionalUniformExactPrior)) and value <= 0:
        raise OutOfSupportError(f"{spec.family} prior requires value > 0, got {value}")
    if isinstance(spec, FunctionalUniformApproxPrior):
        ratio = value / _require_max_dose(spec)
        if not 0 < ratio <= spec.upper_ratio * (1 + SUPPORT_SLACK):
            raise OutOfSupportError(
                f"functional uniform prior requires ED50/max_dose in (0, {spec.upper_ratio}], got {ratio:.6g}"
            )


def _lognormal_kernel(x: float, mu_log: float, sd_log: float) -> tuple[float, float]:
    """Log-normal kernel and its derivative in x."""
    log_x = math.log(x)
    z = (log_x - mu_log) / sd_log
    value = -log_x - 0.5 * z * z
    derivative = (-1.0 - z / sd_log) / x
    return value, derivative


def log_density(spec: PriorSpec, value: float) -> float:
    return log_density_and_derivative(spec, value)[0]


def log_density_derivative(spec: PriorSpec, value: float) -> float:
    return log_density_and_derivative(spec, value)[1]


def log_density_and_derivative(spec: PriorSpec, value: float) -> tuple[float, float]:
    """Unnormalised log p(value) and d/dvalue log p(value)."""
    value = float(value)
    _check_support(spec, value)

    if isinstance(spec, FlatPrior):
        return 0.0, 0.0

    if isinstance(spec, NormalPrior):
        z = (value - spec.mu) / spec.sd
        return -0.5 * z * z, -z / spec.sd

    if isinstance(spec, HalfNormalPrior):
        z = value / spec.scale
        return -0.5 * z * z, -z / spec.scale

    if isinstance(spec, LogNormalPrior):
        return _lognormal_kernel(value, spec.mu_log, spec.sd_log)

    if isinstance(spec, FunctionalUniformApproxPrior):
        max_dose = _require_max_dose(spec)
        kernel, derivative = _lognormal_kernel(value / max_dose, spec.mu_log, spec.sd_log)
        return kernel - math.log(max_dose), derivative / max_dose

    if isinstance(spec, FunctionalUniformExactPrior):
        return _functional_uniform_log_density(np.asarray(spec.dose_grid, dtype=float), value)

    raise ValueError(f"Unsupported prior family: {spec}")


def log_density_on_log_scale(spec: PriorSpec, log_value: float) -> tuple[float, float]:
    """Prior kernel of a positive parameter evaluated from its logarithm.

    Returns log p(exp(log_value)) and its derivative in log_value. Log-normal
    families are computed without leaving log space so values that underflow
    to 0 stay finite.
    """
    log_value = float(log_value)
    if not math.isfinite(log_value):
        raise OutOfSupportError(f"{spec.family} prior evaluated at log value {log_value}")

    if isinstance(spec, (LogNormalPrior, FunctionalUniformApproxPrior)):
        if isinstance(spec, FunctionalUniformApproxPrior):
            log_x = log_value - math.log(_require_max_dose(spec))
            if log_x > math.log(spec.upper_ratio) + SUPPORT_SLACK:
                raise OutOfSupportError(
                    f"functional uniform prior requires ED50/max_dose <= {spec.upper_ratio}, "
                    f"got {math.exp(log_x):.6g}"
                )
        else:
            log_x = log_value
        z = (log_x - spec.mu_log) / spec.sd_log
        return -log_value - 0.5 * z * z, -1.0 - z / spec.sd_log

    value = math.exp(log_value)
    kernel, derivative = log_density_and_derivative(spec, value)
    return kernel, derivative * value


def _information_matrix(dose_grid: np.ndarray, theta: EmaxParams) -> np.ndarray:
    F = emax_gradient(theta, dose_grid)
    return F.T @ F


def _is_singular(Z: np.ndarray, det: float) -> bool:
    hadamard = float(np.prod(np.diag(Z)))
    return hadamard <= 0 or det <= SINGULAR_TOLERANCE * hadamard


def functional_uniform_exact(dose_grid, theta: EmaxParams) -> float:
    """sqrt(det(F^T F)) with rows of F the Emax gradient at each grid dose.

    Unnormalised. Raises SingularInformationError when F^T F is rank
    deficient (fewer than three distinct doses, or Emax = 0).
    """
    grid = np.asarray(dose_grid, dtype=float)
    if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) < 0):
        raise ValueError("Dose grid must be non-empty, strictly positive and sorted")
    Z = _information_matrix(grid, theta)
    det = float(np.linalg.det(Z))
    if _is_singular(Z, det):
        raise SingularInformationError(
            f"Information matrix is singular on this grid (det={det:.3g})"
        )
    return math.sqrt(det)


def _functional_uniform_log_density(grid: np.ndarray, ed50: float) -> tuple[float, float]:
    """log sqrt(det Z) for the ED50 prior (Emax fixed at 1) and its ED50 derivative."""
    theta = EmaxParams(e0=0.0, emax=1.0, ed50=ed50)
    F = emax_gradient(theta, grid)
    Z = F.T @ F
    det = float(np.linalg.det(Z))
    if _is_singular(Z, det):
        raise SingularInformationError(f"Information matrix is singular at ED50={ed50:.6g}")

    denom = ed50 + grid
    dF = np.column_stack([
        np.zeros_like(grid),
        -grid / denom ** 2,
        2.0 * grid / denom ** 3,
    ])
    dZ = dF.T @ F + F.T @ dF
    derivative = 0.5 * float(np.trace(np.linalg.solve(Z, dZ)))
    return 0.5 * math.log(det), derivative


def wip_range(tau: float) -> float:
    """Ratio of the 97.5% to the 2.5% point of exp(N(mu, tau^2))."""
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    return math.exp(WIP_QUANTILE_SPAN * tau)


def wip_emax_range(tau: float) -> float:
    """Width between the 97.5% and 2.5% points of N(mu, tau^2)."""
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    return WIP_QUANTILE_SPAN * tau
