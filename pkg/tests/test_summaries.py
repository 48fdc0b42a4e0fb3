import numpy as np
import pandas as pd
import pytest
from scipy.integrate import trapezoid
from scipy.stats import norm

from src.models.specs import ModelSpec, SamplerConfig
from src.services.datasets import load_builtin
from src.services.sampler import sample
from src.services.summaries import (
    CURVE_COLUMNS,
    SUMMARY_COLUMNS,
    curve_grid,
    curve_summary,
    marginal_density,
    prior_density,
    silverman_bandwidth,
    summarize_params,
)


@pytest.fixture(scope="module")
def cp_fit():
    config = SamplerConfig(chains=2, iterations=500, warmup=250, seed=21)
    return sample(ModelSpec(label="cp"), load_builtin("dupilumab"), config)


@pytest.fixture(scope="module")
def re_fit():
    config = SamplerConfig(chains=2, iterations=500, warmup=250, seed=22)
    return sample(ModelSpec(ed50_mode="re", label="pp-re"), load_builtin("dupilumab"), config)


def test_summarize_params_on_a_table():
    frame = pd.DataFrame({"chain": [0] * 5, "draw": range(5), "a": [1.0, 2.0, 3.0, 4.0, 5.0]})
    summary = summarize_params(frame)
    assert list(summary.columns) == SUMMARY_COLUMNS
    row = summary.iloc[0]
    assert row["parameter"] == "a"
    assert row["mean"] == 3.0
    assert row["median"] == 3.0
    assert row["sd"] == pytest.approx(np.std([1, 2, 3, 4, 5], ddof=1))
    assert row["q025"] == pytest.approx(1.1)
    assert row["q975"] == pytest.approx(4.9)


def test_summarize_params_rejects_empty_draws():
    with pytest.raises(ValueError):
        summarize_params(pd.DataFrame({"chain": [], "draw": []}))


def test_complete_pooling_ed50_follows_dosing_intervals(cp_fit):
    natural = cp_fit.natural
    np.testing.assert_allclose(natural["ed50[weekly]"], 0.5 * natural["ed50[biweekly]"], rtol=1e-12)
    np.testing.assert_allclose(natural["ed50[monthly]"], 2.0 * natural["ed50[biweekly]"], rtol=1e-12)
    summary = summarize_params(cp_fit).set_index("parameter")
    assert summary.loc["ed50[monthly]", "mean"] == pytest.approx(4 * summary.loc["ed50[weekly]", "mean"])
    assert list(summary.index) == ["e0", "emax", "ed50[weekly]", "ed50[biweekly]", "ed50[monthly]"]


def test_random_effects_summary_includes_scale(re_fit):
    summary = summarize_params(re_fit).set_index("parameter")
    assert {"mu_ed50", "tau_ed50"} <= set(summary.index)
    assert (summary.loc["tau_ed50", ["mean", "median", "q025"]] > 0).all()


def test_curve_summary_on_own_dose_scale(cp_fit):
    grid = curve_grid(cp_fit, "weekly", points=11)
    assert grid[0] == 0.0
    assert grid[-1] == pytest.approx(300.0)
    curve = curve_summary(cp_fit, "weekly", grid)
    assert list(curve.columns) == CURVE_COLUMNS
    assert (curve["method"] == "cp").all()
    assert (curve["lower"] <= curve["median"]).all()
    assert (curve["median"] <= curve["upper"]).all()
    # placebo is E0 on every schedule
    assert curve["median"].iloc[0] == pytest.approx(cp_fit.natural["e0"].median())


def test_curves_coincide_after_dose_conversion(cp_fit):
    weekly = curve_summary(cp_fit, "weekly", [150.0])
    monthly = curve_summary(cp_fit, "monthly", [600.0])
    assert weekly["median"].iloc[0] == pytest.approx(monthly["median"].iloc[0], rel=1e-9)


def test_curve_summary_rejects_negative_doses(cp_fit):
    with pytest.raises(ValueError):
        curve_summary(cp_fit, "biweekly", [-1.0, 2.0])


def test_silverman_bandwidth_of_a_normal_sample():
    values = np.random.default_rng(0).normal(size=2000)
    assert silverman_bandwidth(values) == pytest.approx(0.9 * 2000 ** -0.2, rel=0.1)


def test_marginal_density_integrates_to_one_and_tracks_the_truth():
    values = np.random.default_rng(1).normal(3.0, 2.0, size=5000)
    frame = pd.DataFrame({"x": values})
    density = marginal_density(frame, "x", points=512)
    assert list(density.columns) == ["value", "density"]
    assert trapezoid(density["density"], density["value"]) == pytest.approx(1.0, abs=1e-3)
    central = marginal_density(frame, "x", grid=np.linspace(2.0, 4.0, 5))
    np.testing.assert_allclose(central["density"], norm.pdf(central["value"], 3.0, 2.0), rtol=0.12)


def test_marginal_density_of_constant_draws_is_finite():
    frame = pd.DataFrame({"x": np.full(600, 2.5)})
    density = marginal_density(frame, "x", points=21)
    assert np.all(np.isfinite(density["density"]))
    assert density["density"].max() > 0


@pytest.mark.parametrize("parameter, upper", [("ed50[biweekly]", 900.0), ("ed50[weekly]", 450.0)])
def test_prior_density_integrates_over_the_bounds(cp_fit, parameter, upper):
    grid = np.linspace(1e-6, upper, 400001)
    density = prior_density(cp_fit, parameter, grid)
    assert trapezoid(density, grid) == pytest.approx(1.0, abs=1e-3)
    assert prior_density(cp_fit, parameter, np.array([upper * 1.01]))[0] == 0.0


def test_prior_density_only_for_ed50_parameters(cp_fit, re_fit):
    assert prior_density(cp_fit, "emax", [1.0]) is None
    assert prior_density(re_fit, "ed50[weekly]", [1.0]) is None
    assert prior_density(re_fit, "tau_ed50", [1.0]) is None
    assert prior_density(re_fit, "mu_ed50", [50.0]) is not None


def test_median_curve_is_monotone_when_every_draw_is(cp_fit):
    assert (cp_fit.natural["emax"] < 0).all()
    for label in ("weekly", "biweekly", "monthly"):
        curve = curve_summary(cp_fit, label, curve_grid(cp_fit, label, points=41))
        assert np.all(np.diff(curve["median"]) <= 1e-12)


def test_marginal_density_agrees_with_a_histogram():
    values = np.random.default_rng(3).normal(3.0, 2.0, size=5000)
    frame = pd.DataFrame({"x": values})
    edges = np.linspace(-1.0, 7.0, 11)
    counts, _ = np.histogram(values, bins=edges)
    for left, right, count in zip(edges[:-1], edges[1:], counts):
        grid = np.linspace(left, right, 201)
        mass = trapezoid(marginal_density(frame, "x", grid=grid)["density"], grid)
        assert mass == pytest.approx(count / values.size, rel=0.2)
