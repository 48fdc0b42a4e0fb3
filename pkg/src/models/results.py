from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Optional
import math

import numpy as np
import pandas as pd

from .schemas import EmaxParams, Schedule
from .specs import ModelSpec, SamplerConfig


class Diagnostics(BaseModel):
    rhat: dict[str, float]
    ess_bulk: dict[str, float]
    divergences: int = Field(0, ge=0)
    rhat_threshold: float = 1.05

    @property
    def max_rhat(self) -> float:
        finite = [r for r in self.rhat.values() if math.isfinite(r)]
        return max(finite) if finite else math.nan

    @property
    def min_ess(self) -> float:
        finite = [e for e in self.ess_bulk.values() if math.isfinite(e)]
        return min(finite) if finite else math.nan

    @property
    def converged(self) -> bool:
        """No finite R-hat above the threshold"""
        return all(r <= self.rhat_threshold for r in self.rhat.values() if math.isfinite(r))


class ChainStats(BaseModel):
    chain: int
    step_size: float
    inverse_metric: list[float]
    mean_accept_stat: float
    divergences: int
    max_depth_hits: int


class PosteriorDraws(BaseModel):
    """Post-warmup draws of all chains.

    ``draws`` holds the unconstrained coordinates as (chains, draws, dim);
    ``natural`` is the matching natural-scale table with ``chain`` and
    ``draw`` columns; ``log_lik`` is (chains * draws, observations) in the
    same row order as ``natural``.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    spec: ModelSpec
    config: SamplerConfig
    parameter_names: list[str]
    draws: np.ndarray
    natural: pd.DataFrame
    log_lik: np.ndarray
    divergent: np.ndarray
    schedules: list[Schedule]
    reference_schedule_id: int
    max_dose: float
    ed50_bounds: tuple[float, float]
    chain_stats: list[ChainStats] = []
    diagnostics: Optional[Diagnostics] = None

    @model_validator(mode='after')
    def validate_shapes(self) -> 'PosteriorDraws':
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.parameter_names):
            raise ValueError(f'draws must be (chains, draws, {len(self.parameter_names)}), got {self.draws.shape}')
        rows = self.draws.shape[0] * self.draws.shape[1]
        if len(self.natural) != rows or self.log_lik.shape[0] != rows:
            raise ValueError('natural and log_lik must have one row per draw')
        if self.divergent.shape != self.draws.shape[:2]:
            raise ValueError('divergent flags must be (chains, draws)')
        return self

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        """Post-warmup draws per chain"""
        return self.draws.shape[1]

    @property
    def total_draws(self) -> int:
        return self.n_chains * self.n_draws

    @property
    def divergence_count(self) -> int:
        return int(self.divergent.sum())

    @property
    def natural_names(self) -> list[str]:
        return [c for c in self.natural.columns if c not in ('chain', 'draw')]

    @property
    def reference(self) -> Schedule:
        return next(s for s in self.schedules if s.id == self.reference_schedule_id)

    def schedule(self, label: str) -> Schedule:
        key = ' '.join(label.strip().split()).lower()
        for s in self.schedules:
            if s.label == key:
                return s
        raise KeyError(f'Unknown schedule label: {label}')

    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[2])

    def natural_by_chain(self, name: str) -> np.ndarray:
        """(chains, draws) array of one natural-scale parameter"""
        return self.natural[name].to_numpy().reshape(self.n_chains, self.n_draws)

    def curve_parameters(self, label: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-draw (E0, Emax, ED50) of a schedule, ED50 on that schedule's own dose scale"""
        key = self.schedule(label).label
        emax_column = 'emax' if 'emax' in self.natural.columns else f'emax[{key}]'
        return (
            self.natural['e0'].to_numpy(),
            self.natural[emax_column].to_numpy(),
            self.natural[f'ed50[{key}]'].to_numpy(),
        )


class MleFit(BaseModel):
    """Complete-pooling maximum likelihood fit on the reference dose scale"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: EmaxParams
    sigma_hat: float
    vcov: np.ndarray
    converged: bool
    at_bound: bool = False
    bounds: tuple[float, float]
    n_obs: int
    rss: float
    profile_ed50: np.ndarray
    profile_rss: np.ndarray

    @model_validator(mode='after')
    def validate_vcov(self) -> 'MleFit':
        if self.vcov.shape != (3, 3):
            raise ValueError(f'vcov must be 3x3, got {self.vcov.shape}')
        return self

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def profile(self) -> pd.DataFrame:
        return pd.DataFrame({'ed50': self.profile_ed50, 'rss': self.profile_rss})


class LooResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    elpd_loo: float
    loo_ic: float
    p_loo: float
    lpd: float
    se_elpd_loo: float
    pointwise: np.ndarray
    pareto_k: np.ndarray
    k_threshold: float = 0.7

    @property
    def max_k(self) -> float:
        return float(np.max(self.pareto_k)) if self.pareto_k.size else 0.0

    @property
    def n_high_k(self) -> int:
        return int(np.sum(self.pareto_k > self.k_threshold))


class ComparisonRow(BaseModel):
    label: str
    success: bool
    loo_ic: Optional[float] = None
    delta_loo_ic: Optional[float] = None
    se_delta: Optional[float] = None
    elpd_loo: Optional[float] = None
    p_loo: Optional[float] = None
    max_k: Optional[float] = None
    divergences: Optional[int] = None
    error: Optional[str] = None
