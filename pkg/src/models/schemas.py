from pydantic import BaseModel, Field, field_validator, model_validator, ConfigDict
from enum import Enum
from typing import Optional
import logging
import math
import warnings

from ..core.errors import MissingPlaceboWarning

logger = logging.getLogger(__name__)


class ObservationKind(str, Enum):
    PATIENT_LEVEL = "PatientLevel"
    ARM_LEVEL = "ArmLevel"


class Schedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int = Field(..., ge=0)
    label: str = Field(..., min_length=1, max_length=64)
    interval_hours: float = Field(..., gt=0)

    @field_validator('label')
    @classmethod
    def normalize_label(cls, v: str) -> str:
        if not v or not v.strip():
            raise ValueError('Schedule label cannot be empty')
        return ' '.join(v.strip().split()).lower()


class EmaxParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    e0: float
    emax: float
    ed50: float = Field(..., gt=0)

    @field_validator('e0', 'emax')
    @classmethod
    def require_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError(f'Emax parameters must be finite, got {v}')
        return v


class ArmSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    schedule_id: int = Field(..., ge=0)
    dose: float = Field(..., ge=0)
    n_planned: int = Field(..., gt=0)


class TrialDesign(BaseModel):
    model_config = ConfigDict(frozen=True)

    schedules: list[Schedule] = Field(..., min_length=1)
    arms: list[ArmSpec] = Field(..., min_length=1)
    reference_schedule_id: int = Field(..., ge=0)

    @model_validator(mode='after')
    def validate_design(self) -> 'TrialDesign':
        ids = [s.id for s in self.schedules]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError(f'Schedule ids must be dense 0..S-1 and unique, got {ids}')

        labels = [s.label for s in self.schedules]
        if len(set(labels)) != len(labels):
            raise ValueError(f'Schedule labels must be unique, got {labels}')

        if self.reference_schedule_id not in ids:
            raise ValueError(f'Unknown reference schedule id: {self.reference_schedule_id}')

        unknown = sorted({a.schedule_id for a in self.arms} - set(ids))
        if unknown:
            raise ValueError(f'Arms reference unknown schedule ids: {unknown}')

        if self.max_dose <= 0:
            raise ValueError('At least one arm must have a positive dose')

        if not any(a.dose == 0 for a in self.arms):
            logger.warning("Design has no placebo arm; E0 is not anchored by data")
            warnings.warn("Design has no placebo arm", MissingPlaceboWarning, stacklevel=2)
        return self

    def schedule(self, schedule_id: int) -> Schedule:
        for s in self.schedules:
            if s.id == schedule_id:
                return s
        raise KeyError(f'Unknown schedule id: {schedule_id}')

    def schedule_by_label(self, label: str) -> Schedule:
        key = ' '.join(label.strip().split()).lower()
        for s in self.schedules:
            if s.label == key:
                return s
        raise KeyError(f'Unknown schedule label: {label}')

    @property
    def reference(self) -> Schedule:
        return self.schedule(self.reference_schedule_id)

    @property
    def max_dose(self) -> float:
        """Largest arm dose after conversion to the reference schedule's dose scale"""
        ref = self.reference
        return max(
            arm.dose * ref.interval_hours / self.schedule(arm.schedule_id).interval_hours
            for arm in self.arms
        )

    def with_reference(self, schedule_id: int) -> 'TrialDesign':
        return TrialDesign(
            schedules=self.schedules,
            arms=self.arms,
            reference_schedule_id=schedule_id,
        )


class ObservationRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    schedule_id: int = Field(..., ge=0)
    dose: float = Field(..., ge=0)
    value: float
    se: Optional[float] = None

    @field_validator('value')
    @classmethod
    def require_finite_value(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError(f'Response values must be finite, got {v}')
        return v


class Observations(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ObservationKind
    rows: list[ObservationRow] = Field(..., min_length=1)

    @model_validator(mode='after')
    def validate_rows(self) -> 'Observations':
        for index, row in enumerate(self.rows):
            if self.kind == ObservationKind.PATIENT_LEVEL and row.se is not None:
                raise ValueError(f'Row {index}: patient-level observations carry no standard error')
            if self.kind == ObservationKind.ARM_LEVEL:
                if row.se is None or not math.isfinite(row.se) or row.se <= 0:
                    raise ValueError(f'Row {index}: arm-level observations need se > 0, got {row.se}')
        return self

    def __len__(self) -> int:
        return len(self.rows)


class TrialData(BaseModel):
    model_config = ConfigDict(frozen=True)

    design: TrialDesign
    observations: Observations
    name: str = "trial"

    @model_validator(mode='after')
    def validate_schedules(self) -> 'TrialData':
        ids = {s.id for s in self.design.schedules}
        unknown = sorted({r.schedule_id for r in self.observations.rows} - ids)
        if unknown:
            raise ValueError(f'Observations reference unknown schedule ids: {unknown}')
        return self

    @property
    def kind(self) -> ObservationKind:
        return self.observations.kind

    @property
    def max_dose(self) -> float:
        return self.design.max_dose

    def with_reference(self, schedule_id: int) -> 'TrialData':
        return TrialData(
            design=self.design.with_reference(schedule_id),
            observations=self.observations,
            name=self.name,
        )
