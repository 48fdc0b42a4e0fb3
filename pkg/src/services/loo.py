"""
Pareto-smoothed importance sampling leave-one-out cross-validation and the
LOO-IC comparison of the model menu.
"""

import logging
import math
import warnings
from typing import Iterable, Mapping, Optional

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from ..core.config import settings
from ..core.errors import (
    DegenerateWeightsWarning,
    DosepoolError,
    InsufficientDrawsError,
    ParetoKWarning,
)
from ..models.priors import ModelPriors
from ..models.results import ComparisonRow, LooResult, PosteriorDraws
from ..models.schemas import TrialData
from ..models.specs import MODEL_MENU, ModelSpec, SamplerConfig
from .sampler import sample

logger = logging.getLogger(__name__)

MIN_DRAWS = 400
MIN_TAIL = 5
DEGENERATE_TOLERANCE = 1e-12
MODEL_FAILURES = (DosepoolError, ValueError, ArithmeticError, np.linalg.LinAlgError)
COMPARISON_COLUMNS = ["model", "loo_ic", "delta_loo_ic", "se_delta", "elpd_loo", "p_loo", "max_k", "divergences", "error"]


def tail_length(n_draws: int) -> int:
    return int(math.ceil(min(0.2 * n_draws, 3.0 * math.sqrt(n_draws))))


def gpd_fit(x: np.ndarray) -> tuple[float, float]:
    """Zhang-Stephens estimate (k, sigma) of a generalised Pareto fitted to sorted exceedances ``x``.

    k is shrunk towards 0.5 with a weak prior worth 10 observations.
    """
    n = x.size
    prior_bs, prior_k = 3.0, 10.0
    m = 30 + int(math.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
    b /= prior_bs * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    profile = n * (np.log(-(b / k)) - k - 1.0)
    weights = 1.0 / np.exp(profile - profile[:, None]).sum(axis=1)
    keep = weights >= 10 * np.finfo(float).eps
    weights, b = weights[keep], b[keep]
    weights /= weights.sum()
    b_post = float(np.sum(b * weights))
    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    return k_post, sigma


def gpd_quantile(probs: np.ndarray, k: float, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.full_like(probs, np.nan)
    if abs(k) < np.finfo(float).eps:
        return -sigma * np.log1p(-probs)
    return sigma * np.expm1(-k * np.log1p(-probs)) / k


def pareto_smooth(log_ratios: np.ndarray) -> tuple[np.ndarray, float]:
    """Smoothed, normalised log-weights and the Pareto k of one observation.

    The largest raw weight is never exceeded.
    """
    lw = np.asarray(log_ratios, dtype=float) - np.max(log_ratios)
    n = lw.size
    m = tail_length(n)
    order = np.argsort(lw)
    cutoff = lw[order[-m - 1]]
    tail = order[-m:]
    tail = tail[lw[tail] > cutoff]

    k = math.inf
    if tail.size >= MIN_TAIL:
        exp_cutoff = math.exp(cutoff)
        exceedances = np.exp(lw[tail]) - exp_cutoff
        k, sigma = gpd_fit(exceedances)
        if math.isnan(k):
            k = math.inf
        if math.isfinite(k):
            probs = (np.arange(tail.size) + 0.5) / tail.size
            smoothed = np.log(gpd_quantile(probs, k, sigma) + exp_cutoff)
            lw[tail] = smoothed
            lw = np.minimum(lw, 0.0)
    return lw - logsumexp(lw), k


def psis_loo(log_lik, min_draws: int = MIN_DRAWS, k_threshold: Optional[float] = None) -> LooResult:
    """PSIS-LOO over a (draws, observations) log-likelihood matrix"""
    log_lik = np.asarray(log_lik, dtype=float)
    if log_lik.ndim != 2:
        raise ValueError(f"Expected (draws, observations), got shape {log_lik.shape}")
    if not np.all(np.isfinite(log_lik)):
        raise ValueError("Log-likelihood matrix has non-finite entries")
    n_draws, n_obs = log_lik.shape
    if n_draws < min_draws:
        raise InsufficientDrawsError(f"PSIS-LOO needs at least {min_draws} draws, got {n_draws}")
    k_threshold = settings.pareto_k_threshold if k_threshold is None else k_threshold

    pointwise = np.empty(n_obs)
    pareto_k = np.empty(n_obs)
    degenerate = 0
    for i in range(n_obs):
        ll = log_lik[:, i]
        if np.ptp(ll) <= DEGENERATE_TOLERANCE * max(1.0, float(np.max(np.abs(ll)))):
            degenerate += 1
            pointwise[i] = ll[0] if np.all(ll == ll[0]) else float(ll.mean())
            pareto_k[i] = 0.0
            continue
        log_weights, pareto_k[i] = pareto_smooth(-ll)
        pointwise[i] = float(logsumexp(log_weights + ll))

    if degenerate:
        logger.warning(f"{degenerate} observation(s) have constant log-likelihood; LOO uses the mean")
        warnings.warn(f"{degenerate} observation(s) with degenerate weights", DegenerateWeightsWarning, stacklevel=2)

    high = int(np.sum(pareto_k > k_threshold))
    if high:
        logger.warning(f"{high} observation(s) with Pareto k above {k_threshold} (max {np.max(pareto_k):.2f})")
        warnings.warn(f"{high} Pareto k values above {k_threshold}", ParetoKWarning, stacklevel=2)

    elpd = float(pointwise.sum())
    lpd = float(np.sum(logsumexp(log_lik, axis=0) - math.log(n_draws)))
    return LooResult(
        elpd_loo=elpd,
        loo_ic=-2.0 * elpd,
        p_loo=lpd - elpd,
        lpd=lpd,
        se_elpd_loo=float(math.sqrt(n_obs * np.var(pointwise))),
        pointwise=pointwise,
        pareto_k=pareto_k,
        k_threshold=k_threshold,
    )


def compare_models(results: Mapping[str, LooResult]) -> pd.DataFrame:
    """LOO-IC table sorted best first, with differences and their standard errors against the best"""
    if not results:
        return pd.DataFrame(columns=COMPARISON_COLUMNS)
    best_label = min(results, key=lambda label: results[label].loo_ic)
    best = results[best_label]
    rows = []
    for label, loo in results.items():
        diff = loo.pointwise - best.pointwise
        rows.append(ComparisonRow(
            label=label,
            success=True,
            loo_ic=loo.loo_ic,
            delta_loo_ic=loo.loo_ic - best.loo_ic,
            se_delta=2.0 * float(math.sqrt(diff.size * np.var(diff))),
            elpd_loo=loo.elpd_loo,
            p_loo=loo.p_loo,
            max_k=loo.max_k,
        ))
    return comparison_frame(rows)


def comparison_frame(rows: Iterable[ComparisonRow]) -> pd.DataFrame:
    frame = pd.DataFrame(
        [{"model": r.label, **r.model_dump(exclude={"label", "success"})} for r in rows],
        columns=COMPARISON_COLUMNS,
    )
    return frame.sort_values("loo_ic", na_position="last", kind="stable").reset_index(drop=True)


def menu_spec(number: int, priors: ModelPriors, reference_schedule_id: Optional[int] = None,
              ed50_bounds: Optional[tuple[float, float]] = None) -> ModelSpec:
    entry = MODEL_MENU[number]
    return ModelSpec(
        ed50_mode=entry.ed50_mode,
        emax_mode=entry.emax_mode,
        reference_schedule_id=reference_schedule_id,
        priors=priors,
        ed50_bounds=ed50_bounds,
        label=f"Model {number}: {entry.label}",
    )


class ModelComparisonService:
    """Fits a set of models to one trial and ranks them by LOO-IC.

    A model that fails is reported in its row and the others continue.
    """

    def __init__(self, config: SamplerConfig, priors: ModelPriors):
        self.config = config
        self.priors = priors
        self.fits: dict[str, PosteriorDraws] = {}

    def fit_one(self, spec: ModelSpec, data: TrialData) -> tuple[Optional[LooResult], Optional[str]]:
        try:
            fit = sample(spec, data, self.config)
            loo = psis_loo(fit.log_lik)
        except MODEL_FAILURES as e:
            logger.error(f"{spec.label} failed: {e}")
            return None, str(e)
        self.fits[spec.label] = fit
        return loo, None

    def compare(self, data: TrialData, specs: list[ModelSpec]) -> pd.DataFrame:
        results: dict[str, LooResult] = {}
        failures: list[ComparisonRow] = []
        for spec in specs:
            loo, error = self.fit_one(spec, data)
            if loo is None:
                failures.append(ComparisonRow(label=spec.label, success=False, error=error))
            else:
                results[spec.label] = loo
                logger.info(f"{spec.label}: LOO-IC {loo.loo_ic:.2f} (max k {loo.max_k:.2f})")

        table = compare_models(results)
        table["divergences"] = [
            self.fits[label].divergence_count if label in self.fits else None for label in table["model"]
        ]
        if failures:
            table = pd.concat([table, comparison_frame(failures)], ignore_index=True)
        return table
