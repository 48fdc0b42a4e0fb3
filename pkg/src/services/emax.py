"""
Emax dose-response function and the schedule re-scaling algebra.

Schedules are described by the number of hours between administrations.
A dose given every ``interval_hours`` is worth ``dose * to / from`` on the dose
scale of a schedule with interval ``to``: monthly 1 mg/kg is 0.5 mg/kg on the
biweekly scale, weekly 300 mg is 600 mg biweekly.
"""

from typing import Union

import numpy as np

from ..models.schemas import EmaxParams, Schedule

ArrayLike = Union[float, np.ndarray]


def emax_response(params: EmaxParams, dose: ArrayLike) -> ArrayLike:
    """E0 + Emax * d / (ED50 + d). Accepts a scalar dose or an array of doses."""
    d = np.asarray(dose, dtype=float)
    if np.any(d < 0):
        raise ValueError("Doses must be non-negative")
    value = params.e0 + params.emax * d / (params.ed50 + d)
    return float(value) if value.ndim == 0 else value


def emax_curve(e0: ArrayLike, emax: ArrayLike, ed50: ArrayLike, dose: ArrayLike) -> np.ndarray:
    """Vectorised Emax evaluation; parameter arrays broadcast against doses."""
    d = np.asarray(dose, dtype=float)
    return np.asarray(e0) + np.asarray(emax) * d / (np.asarray(ed50) + d)


def emax_gradient(params: EmaxParams, dose: ArrayLike) -> np.ndarray:
    """Rows (df/dE0, df/dEmax, df/dED50) of the Emax model at each dose."""
    d = np.atleast_1d(np.asarray(dose, dtype=float))
    denom = params.ed50 + d
    return np.column_stack([
        np.ones_like(d),
        d / denom,
        -params.emax * d / denom ** 2,
    ])


def interval_ratio(source: Schedule, target: Schedule) -> float:
    return target.interval_hours / source.interval_hours


def convert_dose(dose: ArrayLike, source: Schedule, target: Schedule) -> ArrayLike:
    """Express a dose given on ``source`` on the dose scale of ``target``."""
    if source.interval_hours == target.interval_hours:
        return dose
    return dose * target.interval_hours / source.interval_hours


def rescale_ed50(ed50_star: ArrayLike, target: Schedule, reference: Schedule) -> ArrayLike:
    """Map a reference-scale ED50* to the ED50 on ``target``'s own dose scale."""
    if np.any(np.asarray(ed50_star) <= 0):
        raise ValueError("ED50 must be positive")
    if target.interval_hours == reference.interval_hours:
        return ed50_star
    return ed50_star * target.interval_hours / reference.interval_hours
