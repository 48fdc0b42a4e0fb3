"""
Complete-pooling maximum likelihood fit of the Emax model.

Doses are converted to the reference schedule's scale, ED50 is profiled over
a log-spaced grid (E0 and Emax solve a linear least-squares problem at each
grid point) and the grid optimum is refined by a bounded scalar search.
Arm-level data are fitted by weighted least squares with the known standard
errors.
"""

import logging
import math
import warnings
from typing import Optional

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from ..core.config import settings
from ..core.errors import BoundaryEstimateWarning, FitFailure, TooFewDosesError
from ..models.results import MleFit
from ..models.schemas import EmaxParams, ObservationKind, TrialData
from .emax import convert_dose, emax_gradient, emax_response
from .summaries import CURVE_COLUMNS

logger = logging.getLogger(__name__)

GRID_SIZE = 201
GRID_FLOOR = 1e-4  # lower grid end as a fraction of the upper bound when the bound is 0
REFINE_TOLERANCE = 1e-6
FLAT_TOLERANCE = 1e-10
Z_95 = 1.96
METHOD = "cp-freq"


def reference_scale_arrays(data: TrialData) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dose on the reference scale, response, weight) per observation"""
    design = data.design
    ref = design.reference
    rows = data.observations.rows
    dose = np.array([convert_dose(r.dose, design.schedule(r.schedule_id), ref) for r in rows], dtype=float)
    value = np.array([r.value for r in rows], dtype=float)
    if data.kind == ObservationKind.ARM_LEVEL:
        weight = 1.0 / np.array([r.se for r in rows], dtype=float) ** 2
    else:
        weight = np.ones_like(value)
    return dose, value, weight


def _linear_fit(ed50: float, dose: np.ndarray, value: np.ndarray, sqrt_w: np.ndarray) -> tuple[float, float, float]:
    """(E0, Emax, weighted RSS) with ED50 held fixed"""
    design = np.column_stack([np.ones_like(dose), dose / (ed50 + dose)])
    coef, *_ = np.linalg.lstsq(design * sqrt_w[:, None], value * sqrt_w, rcond=None)
    resid = (value - design @ coef) * sqrt_w
    return float(coef[0]), float(coef[1]), float(resid @ resid)


def fit_mle(
    data: TrialData,
    bounds: Optional[tuple[float, float]] = None,
    grid_size: int = GRID_SIZE,
    tolerance: float = REFINE_TOLERANCE,
) -> MleFit:
    dose, value, weight = reference_scale_arrays(data)
    distinct = np.unique(dose)
    if distinct.size < 3:
        raise TooFewDosesError(f"Need at least 3 distinct dose levels after conversion, got {distinct.size}")

    if bounds is None:
        bounds = (0.0, settings.ed50_upper_ratio * data.max_dose)
    lower, upper = bounds
    if not 0 <= lower < upper:
        raise ValueError(f"ED50 bounds must satisfy 0 <= lower < upper, got {bounds}")

    sqrt_w = np.sqrt(weight)
    grid = np.geomspace(lower if lower > 0 else upper * GRID_FLOOR, upper, grid_size)
    profile = np.array([_linear_fit(e, dose, value, sqrt_w)[2] for e in grid])

    scale = max(float(np.sum(weight * value ** 2)), float(profile.max()), np.finfo(float).tiny)
    converged = True
    if np.ptp(profile) <= FLAT_TOLERANCE * scale:
        ed50 = upper
        converged = False
        logger.warning("Profile deviance is flat in ED50; reporting the upper bound")
        warnings.warn("ED50 is not identifiable (flat profile)", BoundaryEstimateWarning, stacklevel=2)
    else:
        k = int(np.argmin(profile))
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid_size - 1)]
        result = minimize_scalar(
            lambda e: _linear_fit(e, dose, value, sqrt_w)[2],
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": tolerance * grid[k]},
        )
        ed50 = float(result.x) if result.fun <= profile[k] else float(grid[k])

    e0, emax, rss = _linear_fit(ed50, dose, value, sqrt_w)
    at_bound = min(abs(ed50 - lower), abs(ed50 - upper)) <= tolerance * upper
    if at_bound and converged:
        logger.warning(f"ED50 estimate {ed50:.6g} is on a bound of [{lower:.6g}, {upper:.6g}]")
        warnings.warn(f"ED50 estimate {ed50:.6g} is on a bound", BoundaryEstimateWarning, stacklevel=2)

    n = dose.size
    df = n - 3
    sigma_hat = math.sqrt(rss / df) if df > 0 else math.nan
    params = EmaxParams(e0=e0, emax=emax, ed50=ed50)

    J = emax_gradient(params, dose)
    information = J.T @ (J * weight[:, None])
    try:
        vcov = np.linalg.inv(information)
    except np.linalg.LinAlgError as e:
        if converged:
            raise FitFailure(f"Information matrix is singular at ED50={ed50:.6g}") from e
        vcov = np.full((3, 3), np.nan)
    if data.kind == ObservationKind.PATIENT_LEVEL:
        vcov = vcov * sigma_hat ** 2
    vcov = 0.5 * (vcov + vcov.T)

    logger.info(
        f"MLE on '{data.name}': E0={e0:.4g}, Emax={emax:.4g}, ED50={ed50:.4g}, sigma={sigma_hat:.4g}"
    )
    return MleFit(
        params=params,
        sigma_hat=sigma_hat,
        vcov=vcov,
        converged=converged,
        at_bound=bool(at_bound),
        bounds=(lower, upper),
        n_obs=n,
        rss=rss,
        profile_ed50=grid,
        profile_rss=profile,
    )


def curve_ci(fit: MleFit, dose_grid, z: float = Z_95, method: str = METHOD) -> pd.DataFrame:
    """Delta-method pointwise intervals in the curve table layout; ``median`` holds the point estimate"""
    dose = np.atleast_1d(np.asarray(dose_grid, dtype=float))
    estimate = np.atleast_1d(emax_response(fit.params, dose))
    J = emax_gradient(fit.params, dose)
    variance = np.einsum("ij,jk,ik->i", J, fit.vcov, J)
    se = np.sqrt(np.clip(variance, 0.0, None))
    return pd.DataFrame({
        "dose": dose,
        "median": estimate,
        "lower": estimate - z * se,
        "upper": estimate + z * se,
        "method": method,
    }, columns=CURVE_COLUMNS)
