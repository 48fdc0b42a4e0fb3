from pydantic import BaseModel, Field, model_validator, ConfigDict
from enum import Enum
from typing import Optional, Any

from .priors import (
    FunctionalUniformApproxPrior,
    HalfNormalPrior,
    ModelPriors,
    NormalPrior,
)
from ..core.config import Settings


class ParameterMode(str, Enum):
    SHARED = "shared"
    FIXED_EFFECTS = "fe"
    RANDOM_EFFECTS = "re"


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    ed50_mode: ParameterMode = ParameterMode.SHARED
    emax_mode: ParameterMode = ParameterMode.SHARED
    e0_mode: ParameterMode = ParameterMode.SHARED
    sigma_mode: ParameterMode = ParameterMode.SHARED
    reference_schedule_id: Optional[int] = None
    priors: ModelPriors = ModelPriors()
    ed50_bounds: Optional[tuple[float, float]] = None
    label: str = ""

    @model_validator(mode='before')
    @classmethod
    def parse_modes(cls, data: Any) -> Any:
        if isinstance(data, dict):
            aliases = {
                'shared': 'shared', 'cp': 'shared',
                'fe': 'fe', 'fixed': 'fe', 'fixed-effects': 'fe', 'fixedeffects': 'fe',
                're': 're', 'random': 're', 'random-effects': 're', 'randomeffects': 're',
            }
            for key in ('ed50_mode', 'emax_mode'):
                value = data.get(key)
                if isinstance(value, str):
                    data = {**data, key: aliases.get(value.strip().lower(), value)}
        return data

    @model_validator(mode='after')
    def validate_modes(self) -> 'ModelSpec':
        if self.e0_mode != ParameterMode.SHARED:
            raise ValueError('E0 is always shared between schedules')
        if self.sigma_mode != ParameterMode.SHARED:
            raise ValueError('Per-schedule sigma is not implemented')
        if self.ed50_bounds is not None:
            lower, upper = self.ed50_bounds
            if not 0 <= lower < upper:
                raise ValueError(f'ED50 bounds must satisfy 0 <= lower < upper, got {self.ed50_bounds}')
        return self

    @property
    def is_complete_pooling(self) -> bool:
        return self.ed50_mode == ParameterMode.SHARED and self.emax_mode == ParameterMode.SHARED

    def resolve_bounds(self, max_dose: float) -> tuple[float, float]:
        if self.ed50_bounds is not None:
            return self.ed50_bounds
        ratio = 1.5
        if isinstance(self.priors.ed50, FunctionalUniformApproxPrior):
            ratio = self.priors.ed50.upper_ratio
        return 0.0, ratio * max_dose


class MenuEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    number: int
    label: str
    ed50_mode: ParameterMode
    emax_mode: ParameterMode


MODEL_MENU: dict[int, MenuEntry] = {
    1: MenuEntry(number=1, label="CP", ed50_mode=ParameterMode.SHARED, emax_mode=ParameterMode.SHARED),
    2: MenuEntry(number=2, label="PP-FE (ED50)", ed50_mode=ParameterMode.FIXED_EFFECTS, emax_mode=ParameterMode.SHARED),
    3: MenuEntry(number=3, label="PP-RE (ED50)", ed50_mode=ParameterMode.RANDOM_EFFECTS, emax_mode=ParameterMode.SHARED),
    4: MenuEntry(number=4, label="PP-FE (ED50, Emax)", ed50_mode=ParameterMode.FIXED_EFFECTS, emax_mode=ParameterMode.FIXED_EFFECTS),
    5: MenuEntry(number=5, label="PP-RE (ED50, Emax)", ed50_mode=ParameterMode.RANDOM_EFFECTS, emax_mode=ParameterMode.RANDOM_EFFECTS),
}


class SamplerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    chains: int = Field(3, gt=0)
    iterations: int = Field(4000, gt=0)
    warmup: int = Field(2000, gt=0)
    target_accept: float = Field(0.8, gt=0, lt=1)
    max_tree_depth: int = Field(10, gt=0)
    seed: int = Field(0, ge=0, le=2**64 - 1)
    divergence_threshold: float = Field(1000.0, gt=0)
    parallel_chains: bool = False

    @model_validator(mode='after')
    def validate_warmup(self) -> 'SamplerConfig':
        if self.warmup >= self.iterations:
            raise ValueError(f'warmup ({self.warmup}) must be smaller than iterations ({self.iterations})')
        return self

    @property
    def draws_per_chain(self) -> int:
        return self.iterations - self.warmup


def priors_from_settings(config: Settings, overrides: Optional[dict[str, Any]] = None) -> ModelPriors:
    """Default priors from settings, with optional ``{role: prior-dict}`` overrides"""
    base = {
        'e0': NormalPrior(mu=0.0, sd=config.e0_prior_sd),
        'emax': NormalPrior(mu=0.0, sd=config.emax_prior_sd),
        'sigma': HalfNormalPrior(scale=config.sigma_prior_scale),
        'ed50': FunctionalUniformApproxPrior(
            mu_log=config.ed50_prior_mu_log,
            sd_log=config.ed50_prior_sd_log,
            upper_ratio=config.ed50_upper_ratio,
        ),
        'tau_ed50': HalfNormalPrior(scale=config.tau_ed50_prior_scale),
        'tau_emax': HalfNormalPrior(scale=config.tau_emax_prior_scale),
    }
    priors = ModelPriors(**base)
    if overrides:
        unknown = set(overrides) - set(base)
        if unknown:
            raise ValueError(f'Unknown prior roles: {sorted(unknown)}')
        merged = {**priors.model_dump(), **overrides}
        priors = ModelPriors.model_validate(merged)
    return priors


def sampler_from_settings(config: Settings, seed: int, **overrides: Any) -> SamplerConfig:
    values = {
        'chains': config.chains,
        'iterations': config.iterations,
        'warmup': config.warmup,
        'target_accept': config.target_accept,
        'max_tree_depth': config.max_tree_depth,
        'divergence_threshold': config.divergence_threshold,
        'parallel_chains': config.parallel_chains,
        'seed': seed,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    return SamplerConfig(**values)
