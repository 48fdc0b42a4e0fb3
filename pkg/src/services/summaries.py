import logging
import math
from typing import Optional, Union

import numpy as np
import pandas as pd
from scipy.stats import lognorm

from ..core.config import settings
from ..models.priors import FunctionalUniformApproxPrior, LogNormalPrior
from ..models.results import PosteriorDraws
from ..models.specs import ParameterMode
from .emax import convert_dose, emax_curve

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["parameter", "mean", "sd", "median", "q025", "q975"]
CURVE_COLUMNS = ["dose", "median", "lower", "upper", "method"]
MIN_DENSITY_DRAWS = 500


def _natural(draws: Union[PosteriorDraws, pd.DataFrame]) -> pd.DataFrame:
    frame = draws.natural if isinstance(draws, PosteriorDraws) else draws
    return frame.drop(columns=[c for c in ("chain", "draw") if c in frame.columns])


def summarize_params(draws: Union[PosteriorDraws, pd.DataFrame]) -> pd.DataFrame:
    """Mean, sd, median and equi-tailed 95% limits of every natural-scale parameter"""
    frame = _natural(draws)
    if frame.empty:
        raise ValueError("No draws to summarise")
    rows = []
    for name in frame.columns:
        values = frame[name].to_numpy(dtype=float)
        q025, median, q975 = np.quantile(values, [0.025, 0.5, 0.975])
        rows.append({
            "parameter": name,
            "mean": float(values.mean()),
            "sd": float(values.std(ddof=1)) if values.size > 1 else 0.0,
            "median": float(median),
            "q025": float(q025),
            "q975": float(q975),
        })
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def curve_grid(draws: PosteriorDraws, label: str, points: Optional[int] = None) -> np.ndarray:
    """Equidistant doses from 0 to the maximum dose, on ``label``'s own dose scale"""
    points = points or settings.curve_points
    top = convert_dose(draws.max_dose, draws.reference, draws.schedule(label))
    return np.linspace(0.0, top, points)


def curve_summary(draws: PosteriorDraws, schedule: str, dose_grid) -> pd.DataFrame:
    """Pointwise posterior median and 95% limits of the curve of one schedule.

    ``dose_grid`` is on that schedule's own dose scale; ``method`` is the
    model label.
    """
    dose = np.asarray(dose_grid, dtype=float)
    if np.any(dose < 0):
        raise ValueError("Doses must be non-negative")
    ceiling = draws.ed50_bounds[1] * draws.schedule(schedule).interval_hours / draws.reference.interval_hours
    if dose.size and dose.max() > ceiling * (1 + 1e-9):
        logger.warning(f"Curve grid for '{schedule}' extends beyond the ED50 upper bound {ceiling:.6g}")

    e0, emax, ed50 = draws.curve_parameters(schedule)
    curves = emax_curve(e0[:, None], emax[:, None], ed50[:, None], dose[None, :])
    lower, median, upper = np.quantile(curves, [0.025, 0.5, 0.975], axis=0)
    method = draws.spec.label or f"ed50-{draws.spec.ed50_mode.value}/emax-{draws.spec.emax_mode.value}"
    return pd.DataFrame(
        {"dose": dose, "median": median, "lower": lower, "upper": upper, "method": method},
        columns=CURVE_COLUMNS,
    )


def silverman_bandwidth(values: np.ndarray) -> float:
    std = float(np.std(values))
    q75, q25 = np.percentile(values, [75, 25])
    spread = min(std, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = std
    return 0.9 * spread * values.size ** (-0.2)


def marginal_density(
    draws: Union[PosteriorDraws, pd.DataFrame],
    parameter: str,
    grid=None,
    points: Optional[int] = None,
) -> pd.DataFrame:
    """Gaussian kernel density estimate of one parameter: columns value, density"""
    values = _natural(draws)[parameter].to_numpy(dtype=float)
    if values.size < MIN_DENSITY_DRAWS:
        logger.warning(f"Density of '{parameter}' from only {values.size} draws")

    bandwidth = silverman_bandwidth(values)
    if grid is None:
        points = points or settings.density_points
        if bandwidth <= 0:
            bandwidth = max(abs(float(values[0])) * 1e-3, 1e-8)
        grid = np.linspace(values.min() - 4 * bandwidth, values.max() + 4 * bandwidth, points)
    grid = np.asarray(grid, dtype=float)
    if bandwidth <= 0:
        # all draws equal: one kernel of the grid spacing
        bandwidth = float(np.min(np.diff(grid))) if grid.size > 1 else 1e-8

    z = (grid[:, None] - values[None, :]) / bandwidth
    density = np.exp(-0.5 * z ** 2).sum(axis=1) / (values.size * bandwidth * math.sqrt(2 * math.pi))
    return pd.DataFrame({"value": grid, "density": density})


def prior_density(draws: PosteriorDraws, parameter: str, grid) -> Optional[np.ndarray]:
    """Prior density of an ED50 parameter on its own dose scale, truncated to the ED50 bounds.

    Available for ``ed50[label]`` of shared and fixed-effects models and for
    ``mu_ed50`` of random-effects models with a log-normal type prior.
    """
    spec = draws.spec
    if parameter == "mu_ed50" and spec.ed50_mode == ParameterMode.RANDOM_EFFECTS:
        ratio = 1.0
    elif parameter.startswith("ed50[") and spec.ed50_mode != ParameterMode.RANDOM_EFFECTS:
        label = parameter[len("ed50["):-1]
        ratio = draws.schedule(label).interval_hours / draws.reference.interval_hours
    else:
        return None

    prior = spec.priors.ed50
    if isinstance(prior, FunctionalUniformApproxPrior):
        location = math.log(prior.max_dose or draws.max_dose) + prior.mu_log
    elif isinstance(prior, LogNormalPrior):
        location = prior.mu_log
    else:
        return None

    star = lognorm(s=prior.sd_log, scale=math.exp(location))
    lower, upper = draws.ed50_bounds
    mass = star.cdf(upper) - star.cdf(lower)
    x = np.asarray(grid, dtype=float) / ratio
    inside = (x > lower) & (x <= upper)
    return np.where(inside, star.pdf(x) / (ratio * mass), 0.0)
