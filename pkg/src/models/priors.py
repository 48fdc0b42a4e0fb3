from pydantic import BaseModel, Field, PositiveFloat, field_validator, ConfigDict
from typing import Annotated, Literal, Optional, Union


class NormalPrior(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Literal["normal"] = "normal"
    mu: float = 0.0
    sd: PositiveFloat = 100.0


class HalfNormalPrior(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Literal["half-normal"] = "half-normal"
    scale: PositiveFloat = 1.0


class LogNormalPrior(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Literal["log-normal"] = "log-normal"
    mu_log: float = 0.0
    sd_log: PositiveFloat = 1.0


class FunctionalUniformApproxPrior(BaseModel):
    """Log-normal approximation of the functional uniform prior, placed on ED50 / max_dose.

    ``max_dose`` may be left unset in configuration; a fit resolves it to the
    trial's reference-scale maximum dose.
    """

    model_config = ConfigDict(frozen=True)

    family: Literal["functional-uniform-approx"] = "functional-uniform-approx"
    max_dose: Optional[PositiveFloat] = None
    mu_log: float = -2.5
    sd_log: PositiveFloat = 1.8
    upper_ratio: PositiveFloat = 1.5


class FunctionalUniformExactPrior(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Literal["functional-uniform-exact"] = "functional-uniform-exact"
    dose_grid: list[float] = Field(..., min_length=1)

    @field_validator('dose_grid')
    @classmethod
    def validate_grid(cls, v: list[float]) -> list[float]:
        if any(x <= 0 for x in v):
            raise ValueError('Dose grid must be strictly positive')
        if any(b < a for a, b in zip(v, v[1:])):
            raise ValueError('Dose grid must be sorted')
        return v


class FlatPrior(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Literal["flat"] = "flat"


PriorSpec = Annotated[
    Union[
        NormalPrior,
        HalfNormalPrior,
        LogNormalPrior,
        FunctionalUniformApproxPrior,
        FunctionalUniformExactPrior,
        FlatPrior,
    ],
    Field(discriminator="family"),
]


class ModelPriors(BaseModel):
    """Prior for every parameter role a model can have"""

    model_config = ConfigDict(frozen=True)

    e0: PriorSpec = NormalPrior(mu=0.0, sd=100.0)
    emax: PriorSpec = NormalPrior(mu=0.0, sd=100.0)
    sigma: PriorSpec = HalfNormalPrior(scale=100.0)
    ed50: PriorSpec = FunctionalUniformApproxPrior()
    tau_ed50: PriorSpec = HalfNormalPrior(scale=1.0)
    tau_emax: PriorSpec = HalfNormalPrior(scale=10.0)


# short-form parameter names per family
PRIOR_ARGUMENTS = {
    "half-normal": ["scale"],
    "normal": ["mu", "sd"],
    "log-normal": ["mu_log", "sd_log"],
    "functional-uniform-approx": ["max_dose"],
    "flat": [],
}


def parse_prior(text: str) -> PriorSpec:
    """Parse the short CLI form ``family:p1,p2`` (e.g. ``half-normal:1``, ``normal:0,100``)."""
    family, _, raw = text.strip().partition(':')
    family = family.strip().lower()
    values = [float(x) for x in raw.split(',') if x.strip()] if raw else []

    if family not in PRIOR_ARGUMENTS:
        raise ValueError(f"Unsupported prior: {text}")
    names = PRIOR_ARGUMENTS[family]
    if values and len(values) != len(names):
        raise ValueError(f"{family} prior needs {','.join(names) or 'no parameters'}, got '{raw}'")

    if family == "half-normal":
        return HalfNormalPrior(scale=values[0]) if values else HalfNormalPrior()
    if family == "normal":
        return NormalPrior(mu=values[0], sd=values[1]) if values else NormalPrior()
    if family == "log-normal":
        return LogNormalPrior(mu_log=values[0], sd_log=values[1]) if values else LogNormalPrior()
    if family == "functional-uniform-approx":
        return FunctionalUniformApproxPrior(max_dose=values[0]) if values else FunctionalUniformApproxPrior()
    return FlatPrior()
