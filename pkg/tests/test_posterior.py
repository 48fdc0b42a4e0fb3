import math
from itertools import product

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import lognorm

from src.core.errors import NonFiniteError, SpecificationError
from src.models.priors import FlatPrior, ModelPriors
from src.models.specs import ModelSpec, ParameterMode
from src.models.study import Scenario, ScheduleTruth
from src.services.datasets import load_builtin
from src.services.mle import fit_mle
from src.services.posterior import Posterior
from src.services.simulation import generate_trial

MODES = [ParameterMode.SHARED, ParameterMode.FIXED_EFFECTS, ParameterMode.RANDOM_EFFECTS]


@pytest.fixture(scope="module")
def dupilumab():
    return load_builtin("dupilumab")


@pytest.fixture(scope="module")
def simulated():
    scenario = Scenario(
        id=0,
        name="small",
        replications=1,
        n_per_arm=5,
        schedules=[
            ScheduleTruth(label="biweekly", interval_hours=336, emax=-60, ed50=2, doses=[0, 1, 3, 10]),
            ScheduleTruth(label="monthly", interval_hours=672, emax=-60, ed50=4, doses=[1, 3, 10]),
        ],
    )
    return generate_trial(scenario, seed=11)


def _random_point(posterior, rng):
    v = rng.uniform(-1.5, 1.5, size=posterior.dim)
    if "log_sigma" in posterior.layout:
        v[posterior.layout.index("log_sigma")] += math.log(35.0)
    return v


def _finite_difference(posterior, v, h=1e-6):
    fd = np.empty_like(v)
    for i in range(v.size):
        up, down = v.copy(), v.copy()
        up[i] += h
        down[i] -= h
        fd[i] = (posterior.log_density(up) - posterior.log_density(down)) / (2 * h)
    return fd


@pytest.mark.parametrize("ed50_mode, emax_mode", list(product(MODES, MODES)))
@pytest.mark.parametrize("source", ["dupilumab", "simulated"])
def test_gradient_matches_finite_differences(request, source, ed50_mode, emax_mode):
    data = request.getfixturevalue(source)
    bounds = (0.001, 15.0) if source == "simulated" else None
    posterior = Posterior(ModelSpec(ed50_mode=ed50_mode, emax_mode=emax_mode, ed50_bounds=bounds), data)
    rng = np.random.default_rng(7)
    for _ in range(3):
        v = _random_point(posterior, rng)
        _, grad = posterior.log_density_and_gradient(v)
        fd = _finite_difference(posterior, v)
        assert np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), 1.0) < 1e-5


def test_layouts_follow_pooling_modes(dupilumab, simulated):
    assert Posterior(ModelSpec(), dupilumab).parameter_names == ["e0", "emax", "ed50_z"]
    m5 = Posterior(ModelSpec(ed50_mode="re", emax_mode="re", ed50_bounds=(0.001, 15.0)), simulated)
    assert m5.parameter_names == [
        "e0", "mu_emax", "emax_raw[biweekly]", "emax_raw[monthly]", "log_tau_emax",
        "mu_ed50_z", "ed50_raw[biweekly]", "ed50_raw[monthly]", "log_tau_ed50", "log_sigma",
    ]
    assert m5.natural_names == [
        "e0", "emax[biweekly]", "emax[monthly]", "mu_emax", "tau_emax",
        "ed50[biweekly]", "ed50[monthly]", "mu_ed50", "tau_ed50", "sigma",
    ]


def test_random_effects_collapse_to_complete_pooling_as_tau_vanishes(dupilumab):
    m1 = Posterior(ModelSpec(), dupilumab)
    m3 = Posterior(ModelSpec(ed50_mode="re"), dupilumab)
    e0, emax, z = -20.0, -55.0, -1.2

    base = m1.log_density([e0, emax, z])
    for omega in [-3.0, -0.5, 0.7]:
        v = np.array([e0, emax, z, 0.0, 0.0, 0.0, omega])
        # only the half-normal(1) scale prior and its log Jacobian remain
        expected = -0.5 * math.exp(2 * omega) + omega
        assert m3.log_density(v) - base == pytest.approx(expected, rel=1e-10, abs=1e-10)

    u = np.array([0.4, -1.1, 0.8])
    v = np.array([e0, emax, z, *u, -30.0])
    expected = -0.5 * float(u @ u) - 0.5 * math.exp(-60.0) - 30.0
    assert m3.log_density(v) - base == pytest.approx(expected, abs=1e-8)


@pytest.mark.parametrize("ed50_mode", MODES)
def test_log_density_does_not_depend_on_reference_schedule(dupilumab, ed50_mode):
    biweekly = Posterior(ModelSpec(ed50_mode=ed50_mode, reference_schedule_id=1), dupilumab)
    weekly = Posterior(ModelSpec(ed50_mode=ed50_mode, reference_schedule_id=0), dupilumab)
    assert weekly.max_dose == pytest.approx(300.0)
    assert weekly.upper == pytest.approx(biweekly.upper / 2)

    rng = np.random.default_rng(17)
    for _ in range(20):
        v = _random_point(biweekly, rng)
        natural = biweekly.constrain(v)
        if ed50_mode == ParameterMode.RANDOM_EFFECTS:
            # the random-effects location lives on the reference scale
            natural["mu_ed50"] /= 2
        assert weekly.log_density(weekly.unconstrain(natural)) == pytest.approx(biweekly.log_density(v), rel=1e-8)


@pytest.mark.parametrize("bounds", [None, (5.0, 800.0)])
def test_bounded_ed50_jacobian_integrates_the_prior(dupilumab, bounds):
    with_jacobian = Posterior(ModelSpec(ed50_bounds=bounds), dupilumab)
    without = Posterior(ModelSpec(ed50_bounds=bounds), dupilumab, jacobian=False)
    prior = with_jacobian.priors.ed50
    ed50 = lognorm(s=prior.sd_log, scale=prior.max_dose * math.exp(prior.mu_log))

    def integrand(z):
        v = np.array([-20.0, -60.0, z])
        log_jacobian = with_jacobian.log_density(v) - without.log_density(v)
        return ed50.pdf(with_jacobian.constrain(v)["ed50[biweekly]"]) * math.exp(log_jacobian)

    mass, _ = quad(integrand, -40.0, 40.0, limit=200)
    lower, upper = with_jacobian.lower, with_jacobian.upper
    assert mass == pytest.approx(ed50.cdf(upper) - ed50.cdf(lower), rel=1e-6)


@pytest.mark.parametrize("ed50_mode, emax_mode", list(product(MODES, MODES)))
def test_constrain_unconstrain_round_trip(simulated, ed50_mode, emax_mode):
    posterior = Posterior(ModelSpec(ed50_mode=ed50_mode, emax_mode=emax_mode, ed50_bounds=(0.001, 15.0)), simulated)
    v = _random_point(posterior, np.random.default_rng(5))
    natural = posterior.constrain(v)
    assert set(natural) == set(posterior.natural_names)
    np.testing.assert_allclose(posterior.unconstrain(natural), v, rtol=1e-8, atol=1e-8)


def test_shared_ed50_scales_with_dosing_interval(simulated):
    posterior = Posterior(ModelSpec(ed50_bounds=(0.001, 15.0)), simulated)
    natural = posterior.constrain(np.array([-20.0, -60.0, 0.3, math.log(30.0)]))
    assert natural["ed50[monthly]"] == pytest.approx(2.0 * natural["ed50[biweekly]"])
    assert 0.001 < natural["ed50[biweekly]"] < 15.0


@pytest.mark.parametrize("source", ["dupilumab", "simulated"])
def test_pointwise_log_likelihood_sums_to_cell_likelihood(request, source):
    data = request.getfixturevalue(source)
    bounds = (0.001, 15.0) if source == "simulated" else None
    posterior = Posterior(ModelSpec(ed50_mode="fe", ed50_bounds=bounds), data)
    rng = np.random.default_rng(9)
    V = np.array([_random_point(posterior, rng) for _ in range(4)])
    pointwise = posterior.pointwise_log_likelihood(V)
    assert pointwise.shape == (4, len(data.observations.rows))
    for row, v in zip(pointwise, V):
        assert row.sum() == pytest.approx(posterior.log_likelihood(v), rel=1e-10)


def test_flat_priors_are_stationary_at_the_maximum_likelihood_fit(dupilumab):
    flat = ModelPriors(e0=FlatPrior(), emax=FlatPrior(), ed50=FlatPrior())
    posterior = Posterior(ModelSpec(priors=flat), dupilumab, jacobian=False)
    assert (posterior.lower, posterior.upper) == (0.0, pytest.approx(900.0))

    # E0 and Emax solve the least-squares problem exactly; ED50 is limited by the scalar search
    fit = fit_mle(dupilumab, tolerance=1e-12)
    v = posterior.unconstrain({"e0": fit.params.e0, "emax": fit.params.emax, "ed50[biweekly]": fit.params.ed50})
    grad = posterior.gradient(v)
    assert abs(grad[0]) < 1e-6
    assert abs(grad[1]) < 1e-6
    assert abs(grad[2]) < 1e-6


def test_non_finite_coordinates_are_rejected(dupilumab):
    posterior = Posterior(ModelSpec(), dupilumab)
    with pytest.raises(NonFiniteError):
        posterior.log_density([0.0, math.nan, 0.0])
    with pytest.raises(ValueError):
        posterior.log_density([0.0, 0.0])


def test_bounds_beyond_functional_uniform_support_are_rejected(dupilumab):
    with pytest.raises(SpecificationError, match="functional uniform"):
        Posterior(ModelSpec(ed50_bounds=(0.0, 2000.0)), dupilumab)


def test_unconstrain_rejects_ed50_outside_bounds(dupilumab):
    posterior = Posterior(ModelSpec(), dupilumab)
    with pytest.raises(ValueError):
        posterior.unconstrain({"e0": 0.0, "emax": -50.0, "ed50[biweekly]": 950.0})
