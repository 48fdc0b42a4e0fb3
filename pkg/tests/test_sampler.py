import math

import numpy as np
import pandas as pd
import pytest

from src.core.errors import AdaptationFailure, InitializationFailure, NonFiniteError
from src.core.seeding import make_rng
from src.models.specs import ModelSpec, SamplerConfig
from src.services.datasets import load_builtin
from src.services.diagnostics import ess_bulk, rhat
from src.services.sampler import (
    DualAveraging,
    NutsSampler,
    PhasePoint,
    WelfordVariance,
    adaptation_windows,
    hamiltonian,
    leapfrog,
    run_chains,
    sample,
    write_draws_csv,
)


class Gaussian:
    """Independent normal target with the given means and standard deviations"""

    def __init__(self, mean, sd):
        self.mean = np.asarray(mean, dtype=float)
        self.precision = 1.0 / np.asarray(sd, dtype=float) ** 2

    def __call__(self, theta):
        delta = theta - self.mean
        return -0.5 * float(delta @ (self.precision * delta)), -self.precision * delta


def _flat(theta):
    return 0.0, np.zeros_like(theta)


def _broken(theta):
    raise NonFiniteError("nowhere finite")


def test_adaptation_windows_double_between_buffers():
    assert adaptation_windows(1000) == (75, 950, [100, 150, 250, 450, 950])
    assert adaptation_windows(100) == (15, 90, [90])
    assert adaptation_windows(10) == (10, 10, [])


def test_dual_averaging_moves_step_size_with_acceptance():
    adapter = DualAveraging(target_accept=0.8)
    adapter.restart(0.1)
    assert adapter.update(0.8) == pytest.approx(1.0)
    low = DualAveraging(target_accept=0.8)
    low.restart(0.1)
    for _ in range(50):
        step = low.update(0.1)
    assert step < 0.1


def test_welford_variance_is_regularized_sample_variance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3)) * [1.0, 2.0, 0.5]
    estimator = WelfordVariance(3)
    for row in x:
        estimator.update(row)
    n = len(x)
    expected = n / (n + 5.0) * x.var(axis=0, ddof=1) + 1e-3 * 5.0 / (n + 5.0)
    np.testing.assert_allclose(estimator.regularized_variance(), expected, rtol=1e-12)


def test_standard_normal_moments():
    config = SamplerConfig(chains=3, iterations=3000, warmup=1000, seed=2024)
    results = run_chains(Gaussian([0.0, 0.0], [1.0, 1.0]), 2, config)
    draws = np.stack([r.draws for r in results])
    assert draws.shape == (3, 2000, 2)
    for i in range(2):
        x = draws[:, :, i]
        assert abs(x.mean()) < 0.05
        assert abs(x.var() - 1.0) < 0.1
        assert rhat(x) < 1.01


def test_conjugate_normal_mean_within_monte_carlo_error():
    y = np.array([0.3, -1.2, 2.1, 0.8, 1.5])
    prior_sd = 2.0
    post_var = 1.0 / (len(y) + 1.0 / prior_sd ** 2)
    post_mean = post_var * y.sum()

    def target(theta):
        mu = theta[0]
        logp = -0.5 * float(np.sum((y - mu) ** 2)) - 0.5 * mu ** 2 / prior_sd ** 2
        return logp, np.array([float(np.sum(y - mu)) - mu / prior_sd ** 2])

    config = SamplerConfig(chains=2, iterations=2000, warmup=1000, seed=5)
    draws = np.stack([r.draws[:, 0] for r in run_chains(target, 1, config)])
    mc_se = math.sqrt(post_var / ess_bulk(draws))
    assert abs(draws.mean() - post_mean) < 3 * mc_se
    assert draws.var() == pytest.approx(post_var, rel=0.15)


def test_chains_are_reproducible_from_the_seed():
    config = SamplerConfig(chains=2, iterations=300, warmup=150, seed=77)
    target = Gaussian([1.0, -2.0], [0.5, 3.0])
    first = run_chains(target, 2, config)
    second = run_chains(target, 2, config)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.draws, b.draws)
    assert not np.array_equal(first[0].draws, first[1].draws)

    other = run_chains(target, 2, config.model_copy(update={"seed": 78}))
    assert not np.array_equal(first[0].draws, other[0].draws)


def test_adapted_metric_tracks_target_scales():
    config = SamplerConfig(chains=1, iterations=1500, warmup=1000, seed=3)
    (result,) = run_chains(Gaussian([0.0, 0.0], [0.1, 10.0]), 2, config)
    assert result.inv_metric[1] / result.inv_metric[0] > 1000
    assert 0.6 < result.accept_stat.mean() < 0.98


def test_improper_target_fails_step_size_search():
    config = SamplerConfig(chains=1, iterations=20, warmup=10, seed=1)
    sampler = NutsSampler(_flat, 2, config, make_rng(1, 0))
    with pytest.raises(AdaptationFailure):
        sampler.run()


def test_no_finite_starting_point_fails_initialization():
    config = SamplerConfig(chains=1, iterations=20, warmup=10, seed=1)
    with pytest.raises(InitializationFailure):
        NutsSampler(_broken, 2, config, make_rng(1, 0)).run()


@pytest.fixture(scope="module")
def dupilumab_fit():
    config = SamplerConfig(chains=2, iterations=600, warmup=300, seed=1)
    return sample(ModelSpec(ed50_mode="fe", label="pp-fe"), load_builtin("dupilumab"), config)


def test_sample_returns_natural_draws_per_chain(dupilumab_fit):
    fit = dupilumab_fit
    assert fit.draws.shape == (2, 300, 5)
    assert list(fit.natural.columns[:2]) == ["chain", "draw"]
    assert fit.natural_names == ["e0", "emax", "ed50[weekly]", "ed50[biweekly]", "ed50[monthly]"]
    assert fit.log_lik.shape == (600, 6)
    assert fit.diagnostics is not None
    lower, upper = fit.ed50_bounds
    for label in ["weekly", "biweekly", "monthly"]:
        star = fit.natural[f"ed50[{label}]"] * fit.reference.interval_hours / fit.schedule(label).interval_hours
        assert star.between(lower, upper).all()


def test_parallel_chains_match_sequential_chains(dupilumab_fit):
    config = dupilumab_fit.config.model_copy(update={"parallel_chains": True})
    parallel = sample(dupilumab_fit.spec, load_builtin("dupilumab"), config)
    np.testing.assert_array_equal(parallel.draws, dupilumab_fit.draws)


def test_write_draws_csv(dupilumab_fit, tmp_path):
    path = write_draws_csv(dupilumab_fit, tmp_path / "draws.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["chain", "draw", *dupilumab_fit.natural_names, "divergent"]
    assert len(frame) == dupilumab_fit.total_draws


class CorrelatedGaussian:
    """Bivariate normal with standard deviations ``sd`` and correlation ``rho``"""

    def __init__(self, sd, rho):
        sd = np.asarray(sd, dtype=float)
        self.cov = np.array([[1.0, rho], [rho, 1.0]]) * np.outer(sd, sd)
        self.precision = np.linalg.inv(self.cov)

    def __call__(self, theta):
        grad = -self.precision @ theta
        return 0.5 * float(theta @ grad), grad


def test_correlated_gaussian_moments():
    target = CorrelatedGaussian([1.0, 2.0], 0.9)
    config = SamplerConfig(chains=3, iterations=3000, warmup=1000, seed=11)
    draws = np.concatenate([r.draws for r in run_chains(target, 2, config)])
    np.testing.assert_allclose(draws.mean(axis=0), [0.0, 0.0], atol=0.15)
    np.testing.assert_allclose(np.cov(draws, rowvar=False), target.cov, rtol=0.1, atol=0.05)
    assert np.corrcoef(draws, rowvar=False)[0, 1] == pytest.approx(0.9, abs=0.03)


def test_leapfrog_conserves_energy_for_small_steps():
    target = CorrelatedGaussian([1.0, 2.0], 0.9)
    inv_metric = np.ones(2)
    theta = np.array([0.7, -1.3])
    logp, grad = target(theta)
    point = PhasePoint(theta, np.array([0.4, 1.1]), grad, logp)
    start = hamiltonian(point.logp, point.p, inv_metric)
    for _ in range(100):
        point = leapfrog(target, point, 1e-4, inv_metric)
    assert abs(hamiltonian(point.logp, point.p, inv_metric) - start) < 1e-6
    assert not np.allclose(point.theta, theta)


SCHOOL_EFFECTS = np.array([28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0])
SCHOOL_SE = np.array([15.0, 10.0, 16.0, 11.0, 9.0, 11.0, 10.0, 18.0])


def _scale_prior(log_tau):
    # half-Cauchy(0, 5) on tau, sampled on the log scale
    t2 = (math.exp(log_tau) / 5.0) ** 2
    return -math.log1p(t2) + log_tau, 1.0 - 2.0 * t2 / (1.0 + t2)


def centred_schools(theta):
    mu, log_tau, eta = theta[0], theta[1], theta[2:]
    tau = math.exp(log_tau)
    lp_tau, dlp_tau = _scale_prior(log_tau)
    dev = (eta - mu) / tau
    resid = (SCHOOL_EFFECTS - eta) / SCHOOL_SE ** 2
    logp = (-0.5 * mu ** 2 / 25.0 + lp_tau - eta.size * log_tau - 0.5 * float(dev @ dev)
            - 0.5 * float(np.sum((SCHOOL_EFFECTS - eta) ** 2 / SCHOOL_SE ** 2)))
    grad = np.empty_like(theta)
    grad[0] = -mu / 25.0 + float(np.sum(dev)) / tau
    grad[1] = dlp_tau - eta.size + float(dev @ dev)
    grad[2:] = -dev / tau + resid
    return logp, grad


def non_centred_schools(theta):
    mu, log_tau, raw = theta[0], theta[1], theta[2:]
    tau = math.exp(log_tau)
    lp_tau, dlp_tau = _scale_prior(log_tau)
    eta = mu + tau * raw
    resid = (SCHOOL_EFFECTS - eta) / SCHOOL_SE ** 2
    logp = (-0.5 * mu ** 2 / 25.0 + lp_tau - 0.5 * float(raw @ raw)
            - 0.5 * float(np.sum((SCHOOL_EFFECTS - eta) ** 2 / SCHOOL_SE ** 2)))
    grad = np.empty_like(theta)
    grad[0] = -mu / 25.0 + float(np.sum(resid))
    grad[1] = dlp_tau + tau * float(resid @ raw)
    grad[2:] = -raw + tau * resid
    return logp, grad


def test_non_centred_random_effects_diverge_less_than_centred():
    config = SamplerConfig(chains=2, iterations=2000, warmup=1000, seed=19)
    centred = sum(int(r.divergent.sum()) for r in run_chains(centred_schools, 10, config))
    non_centred = sum(int(r.divergent.sum()) for r in run_chains(non_centred_schools, 10, config))
    assert centred >= 5
    assert non_centred < centred
