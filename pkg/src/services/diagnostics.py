"""
Convergence diagnostics: rank-normalised split R-hat and bulk effective sample size.
"""

import logging
import math
import warnings
from typing import Optional, Sequence, Union

import numpy as np
from scipy import fft
from scipy.special import ndtri
from scipy.stats import rankdata

from ..core.config import settings
from ..core.errors import ConvergenceWarning, InsufficientDrawsError
from ..models.results import Diagnostics, PosteriorDraws

logger = logging.getLogger(__name__)

MIN_CHAINS = 2
MIN_DRAWS = 100


def _check(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise ValueError(f"Expected (chains, draws), got shape {samples.shape}")
    chains, draws = samples.shape
    if chains < MIN_CHAINS or draws < MIN_DRAWS:
        raise InsufficientDrawsError(
            f"Need at least {MIN_CHAINS} chains of {MIN_DRAWS} draws, got {chains} x {draws}"
        )
    return samples


def _split(samples: np.ndarray) -> np.ndarray:
    """Halve every chain; an odd middle draw is dropped."""
    half = samples.shape[1] // 2
    return np.concatenate([samples[:, :half], samples[:, -half:]], axis=0)


def _rank_normalize(samples: np.ndarray) -> np.ndarray:
    ranks = rankdata(samples, method="average").reshape(samples.shape)
    return ndtri((ranks - 0.375) / (samples.size + 0.25))


def _rhat_basic(samples: np.ndarray) -> float:
    n = samples.shape[1]
    chain_means = samples.mean(axis=1)
    within = samples.var(axis=1, ddof=1).mean()
    between = n * chain_means.var(ddof=1)
    var_hat = (n - 1) / n * within + between / n
    return float(np.sqrt(var_hat / within))


def _is_constant(samples: np.ndarray) -> bool:
    return bool(np.ptp(samples) == 0)


def rhat(samples) -> float:
    """max(bulk, folded) rank-normalised split R-hat of a (chains, draws) array.

    NaN for constant or non-finite input.
    """
    samples = _check(samples)
    if not np.all(np.isfinite(samples)) or _is_constant(samples):
        return math.nan
    split = _split(samples)
    bulk = _rhat_basic(_rank_normalize(split))
    folded = np.abs(split - np.median(split))
    tail = _rhat_basic(_rank_normalize(folded)) if not _is_constant(folded) else bulk
    return max(bulk, tail)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    size = fft.next_fast_len(2 * n)
    centered = x - x.mean()
    spectrum = fft.rfft(centered, n=size)
    return fft.irfft(spectrum * np.conjugate(spectrum), n=size)[:n] / n


def _ess(samples: np.ndarray) -> float:
    """Geyer initial-monotone-sequence ESS over (chains, draws)."""
    chains, n = samples.shape
    acov = np.array([_autocovariance(chain) for chain in samples])
    chain_mean = samples.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if chains > 1:
        var_plus += chain_mean.var(ddof=1)

    rho = np.zeros(n)
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[0], rho[1] = rho_even, rho_odd

    t = 1
    while t < n - 3 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2

    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even

    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    total = chains * n
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + rho[max_t + 1]
    tau = max(tau, 1.0 / math.log10(total))
    return float(total / tau)


def ess_bulk(samples) -> float:
    samples = _check(samples)
    if not np.all(np.isfinite(samples)) or _is_constant(samples):
        return math.nan
    return _ess(_rank_normalize(_split(samples)))


def diagnostics(
    draws: Union[PosteriorDraws, np.ndarray],
    names: Optional[Sequence[str]] = None,
    divergences: int = 0,
    threshold: Optional[float] = None,
) -> Diagnostics:
    """R-hat and bulk ESS per parameter plus the divergence count.

    ``draws`` is a fit (natural-scale parameters are diagnosed) or a raw
    (chains, draws, parameters) array.
    """
    threshold = settings.rhat_threshold if threshold is None else threshold

    if isinstance(draws, PosteriorDraws):
        names = draws.natural_names
        arrays = {name: draws.natural_by_chain(name) for name in names}
        divergences = draws.divergence_count
    else:
        values = np.asarray(draws, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise ValueError(f"Expected (chains, draws, parameters), got shape {values.shape}")
        names = list(names) if names is not None else [f"x[{i}]" for i in range(values.shape[2])]
        if len(names) != values.shape[2]:
            raise ValueError(f"{len(names)} names for {values.shape[2]} parameters")
        arrays = {name: values[:, :, i] for i, name in enumerate(names)}

    rhats: dict[str, float] = {}
    ess: dict[str, float] = {}
    for name, samples in arrays.items():
        rhats[name] = rhat(samples)
        ess[name] = ess_bulk(samples)
        if math.isnan(rhats[name]):
            logger.warning(f"R-hat of '{name}' is undefined (constant or non-finite draws)")
            warnings.warn(f"R-hat of '{name}' is undefined", ConvergenceWarning, stacklevel=2)

    result = Diagnostics(rhat=rhats, ess_bulk=ess, divergences=divergences, rhat_threshold=threshold)
    if not result.converged:
        high = sorted(name for name, r in rhats.items() if r > threshold)
        logger.warning(f"R-hat above {threshold} for {high} (max {result.max_rhat:.3f})")
        warnings.warn(f"R-hat above {threshold} for {high}", ConvergenceWarning, stacklevel=2)
    if divergences:
        logger.warning(f"{divergences} divergent transitions after warmup")
    return result
