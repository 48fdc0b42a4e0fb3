from pydantic import BaseModel, Field, field_validator, model_validator, ConfigDict
from enum import Enum
from itertools import product
from typing import Optional, Any

import numpy as np

from .schemas import ArmSpec, EmaxParams, Schedule, TrialDesign
from .specs import ModelSpec, ParameterMode
from .priors import ModelPriors


class Method(str, Enum):
    CP_FREQ = "cp-freq"
    CP_BAYES = "cp-bayes"
    PP_FE = "pp-fe"
    PP_RE = "pp-re"


ALL_METHODS = [Method.CP_FREQ, Method.CP_BAYES, Method.PP_FE, Method.PP_RE]
POOLABLE = ("ed50", "emax")


def default_eval_grid() -> list[float]:
    return [float(x) for x in np.linspace(0.0, 10.0, 10)]


class ScheduleTruth(BaseModel):
    """True curve and arm doses of one schedule, doses and ED50 on its own scale"""

    model_config = ConfigDict(frozen=True)

    label: str = Field(..., min_length=1)
    interval_hours: float = Field(..., gt=0)
    emax: float
    ed50: float = Field(..., gt=0)
    doses: list[float] = Field(..., min_length=1)

    @field_validator('label')
    @classmethod
    def normalize_label(cls, v: str) -> str:
        return ' '.join(v.strip().split()).lower()

    @field_validator('doses')
    @classmethod
    def validate_doses(cls, v: list[float]) -> list[float]:
        if any(d < 0 for d in v):
            raise ValueError('Doses must be non-negative')
        if len(set(v)) != len(v):
            raise ValueError(f'Duplicate doses: {v}')
        return v


class SamplerOverrides(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    chains: Optional[int] = Field(None, gt=0)
    iterations: Optional[int] = Field(None, gt=0)
    warmup: Optional[int] = Field(None, gt=0)
    target_accept: Optional[float] = Field(None, gt=0, lt=1)
    max_tree_depth: Optional[int] = Field(None, gt=0)

    def merged(self, other: 'SamplerOverrides') -> 'SamplerOverrides':
        """``other`` wins where it sets a value"""
        return SamplerOverrides(**{**self.model_dump(exclude_none=True), **other.model_dump(exclude_none=True)})


class ScenarioBase(BaseModel):
    """Everything that defines a scenario apart from its identity and run length"""

    model_config = ConfigDict(frozen=True)

    e0: float = -20.0
    sigma: float = Field(35.0, ge=0)
    schedules: list[ScheduleTruth] = Field(..., min_length=1)
    reference: str = "biweekly"
    n_per_arm: int = Field(45, gt=0)
    pooled: list[str] = ["ed50"]
    eval_grid: list[float] = Field(default_factory=default_eval_grid, min_length=1)
    ed50_bounds: tuple[float, float] = (0.001, 15.0)

    @field_validator('reference')
    @classmethod
    def normalize_reference(cls, v: str) -> str:
        return ' '.join(v.strip().split()).lower()

    @field_validator('pooled')
    @classmethod
    def validate_pooled(cls, v: list[str]) -> list[str]:
        names = [p.strip().lower() for p in v]
        unknown = sorted(set(names) - set(POOLABLE))
        if unknown or not names:
            raise ValueError(f'pooled must be a non-empty subset of {list(POOLABLE)}, got {v}')
        return names

    @model_validator(mode='after')
    def validate_scenario(self) -> 'ScenarioBase':
        labels = [s.label for s in self.schedules]
        if len(set(labels)) != len(labels):
            raise ValueError(f'Schedule labels must be unique, got {labels}')
        if self.reference not in labels:
            raise ValueError(f"Reference schedule '{self.reference}' is not among {labels}")
        if any(x < 0 for x in self.eval_grid):
            raise ValueError('Evaluation doses must be non-negative')
        lower, upper = self.ed50_bounds
        if not 0 <= lower < upper:
            raise ValueError(f'ED50 bounds must satisfy 0 <= lower < upper, got {self.ed50_bounds}')
        return self


class Scenario(ScenarioBase):
    id: int = Field(..., ge=0)
    name: str
    replications: int = Field(..., gt=0)
    methods: list[Method] = Field(default_factory=lambda: list(ALL_METHODS), min_length=1)

    @field_validator('methods')
    @classmethod
    def unique_methods(cls, v: list[Method]) -> list[Method]:
        if len(set(v)) != len(v):
            raise ValueError(f'Duplicate methods: {[m.value for m in v]}')
        return v

    @property
    def true_params(self) -> dict[str, EmaxParams]:
        return {s.label: EmaxParams(e0=self.e0, emax=s.emax, ed50=s.ed50) for s in self.schedules}

    def design(self) -> TrialDesign:
        """Schedules ordered by interval; the reference is also the evaluation schedule"""
        ordered = sorted(self.schedules, key=lambda s: (s.interval_hours, s.label))
        schedules = [Schedule(id=i, label=s.label, interval_hours=s.interval_hours) for i, s in enumerate(ordered)]
        arms = [
            ArmSpec(schedule_id=i, dose=dose, n_planned=self.n_per_arm)
            for i, truth in enumerate(ordered)
            for dose in truth.doses
        ]
        reference_id = next(s.id for s in schedules if s.label == self.reference)
        return TrialDesign(schedules=schedules, arms=arms, reference_schedule_id=reference_id)

    def true_curve(self) -> np.ndarray:
        params = self.true_params[self.reference]
        grid = np.asarray(self.eval_grid, dtype=float)
        return params.e0 + params.emax * grid / (params.ed50 + grid)

    def model_spec(self, method: Method, priors: ModelPriors) -> Optional[ModelSpec]:
        """Bayesian model of a method; None for the frequentist fit"""
        if method == Method.CP_FREQ:
            return None
        mode = {
            Method.CP_BAYES: ParameterMode.SHARED,
            Method.PP_FE: ParameterMode.FIXED_EFFECTS,
            Method.PP_RE: ParameterMode.RANDOM_EFFECTS,
        }[method]
        return ModelSpec(
            ed50_mode=mode if 'ed50' in self.pooled else ParameterMode.SHARED,
            emax_mode=mode if 'emax' in self.pooled else ParameterMode.SHARED,
            reference_schedule_id=self.design().reference_schedule_id,
            priors=priors,
            ed50_bounds=self.ed50_bounds,
            label=method.value,
        )


class StudyAxis(BaseModel):
    """One varied quantity: ``n_per_arm``, ``e0``, ``sigma`` or ``<schedule>.<emax|ed50>``"""

    model_config = ConfigDict(frozen=True)

    parameter: str
    values: list[float] = Field(..., min_length=1)

    @field_validator('parameter')
    @classmethod
    def validate_parameter(cls, v: str) -> str:
        v = v.strip().lower()
        if v in ('n_per_arm', 'e0', 'sigma'):
            return v
        label, _, field = v.rpartition('.')
        if not label or field not in POOLABLE:
            raise ValueError(f"Axis must be n_per_arm, e0, sigma or '<schedule>.emax|ed50', got '{v}'")
        return v


class StudyFile(BaseModel):
    """Scenario grid: a base scenario crossed with every combination of the axes"""

    model_config = ConfigDict(frozen=True)

    name: str = "study"
    replications: int = Field(1000, gt=0)
    methods: list[Method] = Field(default_factory=lambda: list(ALL_METHODS), min_length=1)
    base: ScenarioBase
    axes: list[StudyAxis] = []
    sampler: SamplerOverrides = SamplerOverrides()

    @model_validator(mode='after')
    def validate_axes(self) -> 'StudyFile':
        labels = {s.label for s in self.base.schedules}
        for axis in self.axes:
            if '.' in axis.parameter and axis.parameter.rpartition('.')[0] not in labels:
                raise ValueError(f"Axis '{axis.parameter}' names an unknown schedule")
        names = [a.parameter for a in self.axes]
        if len(set(names)) != len(names):
            raise ValueError(f'Duplicate axes: {names}')
        return self

    def scenarios(self, replications: Optional[int] = None) -> list[Scenario]:
        """Expand the grid; the first axis varies slowest and ids follow that order"""
        out = []
        for index, combo in enumerate(product(*[a.values for a in self.axes])):
            values = self.base.model_dump()
            parts = []
            for axis, value in zip(self.axes, combo):
                _apply_axis(values, axis.parameter, value)
                parts.append(f"{axis.parameter}={value:g}")
            out.append(Scenario(
                **values,
                id=index,
                name=', '.join(parts) or self.name,
                replications=replications or self.replications,
                methods=self.methods,
            ))
        return out


def _apply_axis(values: dict[str, Any], parameter: str, value: float) -> None:
    if parameter == 'n_per_arm':
        if value != int(value) or value <= 0:
            raise ValueError(f'n_per_arm must be a positive integer, got {value}')
        values['n_per_arm'] = int(value)
    elif parameter in ('e0', 'sigma'):
        values[parameter] = value
    else:
        label, _, field = parameter.rpartition('.')
        for schedule in values['schedules']:
            if schedule['label'] == label:
                schedule[field] = value


class ReplicationMetrics(BaseModel):
    mae: float = Field(..., ge=0)
    covered: list[bool]
    lengths: list[float]

    @property
    def coverage(self) -> float:
        return float(np.mean(self.covered))

    @property
    def mean_length(self) -> float:
        return float(np.mean(self.lengths))


class ScenarioResult(BaseModel):
    """Metrics of one method in one scenario, averaged over successful replications"""

    scenario_id: int
    scenario: str
    method: Method
    replications: int
    failures: int = 0
    mae: Optional[float] = None
    coverage: Optional[float] = Field(None, ge=0, le=1)
    mean_length: Optional[float] = None
    coverage_by_dose: list[float] = []
