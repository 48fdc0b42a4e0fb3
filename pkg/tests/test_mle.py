import warnings

import numpy as np
import pytest

from src.core.errors import BoundaryEstimateWarning, TooFewDosesError
from src.models.schemas import (
    ArmSpec,
    EmaxParams,
    ObservationKind,
    ObservationRow,
    Observations,
    Schedule,
    TrialData,
    TrialDesign,
)
from src.models.study import Scenario, ScheduleTruth
from src.services.datasets import load_builtin
from src.services.emax import emax_response
from src.services.mle import curve_ci, fit_mle, reference_scale_arrays
from src.services.simulation import evaluate_replication, generate_trial
from src.services.summaries import CURVE_COLUMNS

TRUTH = EmaxParams(e0=-20, emax=-60, ed50=2)


def _single_schedule(doses, values):
    schedule = Schedule(id=0, label="biweekly", interval_hours=336)
    design = TrialDesign(
        schedules=[schedule],
        arms=[ArmSpec(schedule_id=0, dose=d, n_planned=1) for d in sorted(set(doses))],
        reference_schedule_id=0,
    )
    rows = [ObservationRow(schedule_id=0, dose=d, value=v) for d, v in zip(doses, values)]
    return TrialData(design=design, observations=Observations(kind=ObservationKind.PATIENT_LEVEL, rows=rows))


def test_noiseless_data_recovers_parameters():
    doses = [0, 0.5, 1, 1.5, 3, 10]
    data = _single_schedule(doses, [float(emax_response(TRUTH, d)) for d in doses])
    fit = fit_mle(data, bounds=(0.001, 15.0))
    assert fit.converged and not fit.at_bound
    assert fit.params.e0 == pytest.approx(-20, rel=1e-4)
    assert fit.params.emax == pytest.approx(-60, rel=1e-4)
    assert fit.params.ed50 == pytest.approx(2, rel=1e-4)
    assert fit.rss == pytest.approx(0, abs=1e-8)


def test_doses_are_pooled_on_the_reference_scale():
    scenario = Scenario(
        id=0,
        name="noiseless",
        replications=1,
        sigma=0.0,
        n_per_arm=2,
        schedules=[
            ScheduleTruth(label="biweekly", interval_hours=336, emax=-60, ed50=2, doses=[0, 1, 3, 10]),
            ScheduleTruth(label="monthly", interval_hours=672, emax=-60, ed50=4, doses=[1, 3, 10]),
        ],
    )
    data = generate_trial(scenario, seed=1)
    dose, _, weight = reference_scale_arrays(data)
    assert sorted(set(dose)) == [0.0, 0.5, 1.0, 1.5, 3.0, 5.0, 10.0]
    assert np.all(weight == 1.0)
    fit = fit_mle(data, bounds=scenario.ed50_bounds)
    assert fit.params.ed50 == pytest.approx(2.0, rel=1e-4)
    assert fit.sigma_hat == pytest.approx(0.0, abs=1e-3)


def test_flat_responses_are_not_identifiable():
    data = _single_schedule([0, 1, 3, 10], [-30.0] * 4)
    with pytest.warns(BoundaryEstimateWarning):
        fit = fit_mle(data, bounds=(0.001, 15.0))
    assert not fit.converged
    assert fit.params.ed50 == 15.0


def test_two_dose_levels_are_too_few():
    data = _single_schedule([0, 0, 10, 10], [-20.0, -21.0, -60.0, -62.0])
    with pytest.raises(TooFewDosesError):
        fit_mle(data)


def test_invalid_bounds_are_rejected():
    data = _single_schedule([0, 1, 3], [-20.0, -40.0, -60.0])
    with pytest.raises(ValueError):
        fit_mle(data, bounds=(5.0, 1.0))


def test_arm_level_fit_uses_known_standard_errors():
    data = load_builtin("dupilumab")
    fit = fit_mle(data)
    assert fit.bounds == (0.0, pytest.approx(900.0))
    assert 0.0 < fit.params.ed50 < 900.0
    assert -30 < fit.params.e0 < -10
    assert fit.params.emax < 0
    assert fit.profile().shape == (201, 2)
    assert np.all(fit.standard_errors > 0)


def test_curve_ci_brackets_the_estimate():
    fit = fit_mle(load_builtin("dupilumab"))
    curve = curve_ci(fit, np.linspace(0, 600, 7))
    assert list(curve.columns) == CURVE_COLUMNS
    assert (curve["method"] == "cp-freq").all()
    assert curve["median"].iloc[0] == pytest.approx(fit.params.e0)
    assert (curve["lower"] < curve["median"]).all()
    assert (curve["median"] < curve["upper"]).all()
    se0 = fit.standard_errors[0]
    assert curve["upper"].iloc[0] - curve["lower"].iloc[0] == pytest.approx(2 * 1.96 * se0)


@pytest.mark.slow
def test_confidence_band_coverage_without_heterogeneity():
    scenario = Scenario(
        id=0,
        name="homogeneous",
        replications=200,
        schedules=[
            ScheduleTruth(label="biweekly", interval_hours=336, emax=-60, ed50=2, doses=[0, 1, 3, 10]),
            ScheduleTruth(label="monthly", interval_hours=672, emax=-60, ed50=4, doses=[1, 3, 10]),
        ],
    )
    truth = scenario.true_curve()
    coverage = []
    for replication in range(scenario.replications):
        data = generate_trial(scenario, seed=1000 + replication)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryEstimateWarning)
            fit = fit_mle(data, bounds=scenario.ed50_bounds)
        curve = curve_ci(fit, scenario.eval_grid)
        metrics = evaluate_replication(curve["median"], curve["lower"], curve["upper"], truth)
        coverage.append(metrics.coverage)
    assert 0.91 <= np.mean(coverage) <= 0.98



def _noisy_single_schedule(shift=0.0):
    doses = np.repeat([0.0, 0.5, 1.0, 3.0, 10.0], 6)
    noise = np.random.default_rng(12).normal(0.0, 5.0, size=doses.size)
    values = emax_response(TRUTH, doses) + noise + shift
    return _single_schedule(doses.tolist(), values.tolist())


def test_shifting_responses_moves_only_the_placebo_level():
    base = fit_mle(_noisy_single_schedule(), bounds=(0.001, 15.0))
    shifted = fit_mle(_noisy_single_schedule(shift=100.0), bounds=(0.001, 15.0))
    assert shifted.params.e0 == pytest.approx(base.params.e0 + 100.0, abs=1e-3)
    assert shifted.params.emax == pytest.approx(base.params.emax, rel=1e-5)
    assert shifted.params.ed50 == pytest.approx(base.params.ed50, rel=1e-5)
    assert shifted.rss == pytest.approx(base.rss, rel=1e-5)


@pytest.mark.parametrize("source", ["noisy", "dupilumab"])
def test_refined_fit_is_no_worse_than_the_profile_grid(source):
    if source == "dupilumab":
        fit = fit_mle(load_builtin("dupilumab"))
    else:
        fit = fit_mle(_noisy_single_schedule(), bounds=(0.001, 15.0))
    assert fit.rss <= fit.profile_rss.min() * (1 + 1e-12)
