"""Thermodynamic integration against the conjugate-Gaussian closed form and
a brute-force quadrature oracle."""

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from steincv.evidence import (ConjugateGaussianModel, TemperatureLadder,
                              rung_expectation, ti_log_evidence,
                              write_rung_csv)
from steincv.samplers import SampleBatch, power_law_rungs


def _model(seed=0, n_data=12):
    return ConjugateGaussianModel.synthetic(
        n_data=n_data, true_mean=1.0, sigma=1.0, prior_mean=0.0,
        prior_var=4.0, seed=seed)


def test_closed_form_evidence_matches_numerical_integration():
    model = _model()
    def integrand(theta):
        loglik = norm.logpdf(model.y, loc=theta).sum()
        return np.exp(loglik) * norm.pdf(theta, 0.0, 2.0)
    val, _ = quad(integrand, -10, 10, limit=200)
    assert abs(model.log_evidence() - np.log(val)) < 1e-6


def test_rung_sampling_matches_posterior_moments():
    model = _model(seed=1)
    for t in (0.0, 0.3, 1.0):
        batch = model.sample_rung(t, 50_000, seed=2)
        mean, var = model._posterior_moments(t)
        assert abs(batch.thetas.mean() - mean) < 4 * np.sqrt(var / 50_000)
        assert abs(batch.thetas.var() - var) < 0.05 * var
        np.testing.assert_allclose(
            batch.f_values, model.log_likelihood(batch.thetas[:, 0]),
            rtol=1e-12)


def test_rung_score_matches_finite_differences():
    model = _model(seed=2)
    t = 0.6
    def log_density(theta):
        return (t * model.log_likelihood(np.array([theta]))[0]
                - 0.5 * (theta - model.m0) ** 2 / model.tau2)
    for theta in (-0.5, 0.8, 2.0):
        fd = (log_density(theta + 1e-6) - log_density(theta - 1e-6)) / 2e-6
        assert abs(model.rung_score(t, np.array([theta]))[0] - fd) < 1e-5


def test_temperature_ladder_validation():
    model = _model()
    batches = {t: model.sample_rung(t, 50, seed=3) for t in (0.1, 0.5, 1.0)}
    ladder = TemperatureLadder((0.1, 0.5, 1.0), batches)
    assert ladder.rungs == (0.1, 0.5, 1.0)
    with pytest.raises(ValueError):
        TemperatureLadder((0.5, 0.1, 1.0), batches)
    with pytest.raises(ValueError):
        TemperatureLadder((0.1, 0.5, 1.0, 2.0), batches)
    with pytest.raises(ValueError):
        TemperatureLadder((0.1, 0.2, 1.0), batches)     # missing batch at 0.2


def test_rung_expectation_plain_mean():
    model = _model(seed=4)
    batch = model.sample_rung(0.5, 500, seed=5)
    res = rung_expectation(batch, method="none", t=0.5)
    assert res.mean == pytest.approx(batch.f_values.mean())
    assert res.variance == pytest.approx(batch.f_values.var(ddof=1))
    with pytest.raises(ValueError):
        rung_expectation(SampleBatch(batch.thetas, batch.scores))


def test_rung_expectation_with_linear_cv_stays_consistent():
    model = _model(seed=6)
    # at a hot rung the posterior sits far from the data mean, so the
    # log-likelihood has a strong linear component for the CV to cancel
    batch = model.sample_rung(0.05, 4_000, seed=7)
    res = rung_expectation(batch, method="linear", t=0.05)
    # the corrected mean must agree with plain MC within a few raw SEs
    se = np.sqrt(res.raw_variance / 2_000)
    assert abs(res.mean - res.raw_mean) < 5 * se
    assert res.variance < res.raw_variance


def test_unknown_method_is_flagged_not_fatal():
    model = _model(seed=8)
    batch = model.sample_rung(0.4, 200, seed=9)
    res = rung_expectation(batch, method="cubic", t=0.4)
    assert any(f.startswith("fit-failed") for f in res.flags)
    assert res.mean == pytest.approx(res.raw_mean)


def test_ti_recovers_the_closed_form_log_evidence():
    model = _model(seed=10, n_data=20)
    rungs = power_law_rungs(20, 5.0, include_zero=True)
    ladder = model.build_ladder(rungs, 2_000, seed=11)
    oracle = model.log_evidence()
    for method in ("none", "linear"):
        est = ti_log_evidence(ladder, method=method)
        assert abs(est.log_evidence - oracle) / abs(oracle) < 0.02
        assert est.flags == []


def test_partial_ladder_is_flagged():
    model = _model(seed=12)
    batches = {t: model.sample_rung(t, 100, seed=13) for t in (0.1, 1.0)}
    est = ti_log_evidence(TemperatureLadder((0.1, 1.0), batches))
    assert "partial-ladder" in est.flags


def test_rung_csv_layout(tmp_path):
    model = _model(seed=14)
    ladder = model.build_ladder((0.0, 0.5, 1.0), 200, seed=15)
    est = ti_log_evidence(ladder, method="none")
    path = tmp_path / "rungs.csv"
    write_rung_csv(est, path, seed=3)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("t,raw_mean,corrected_mean")
    assert len(lines) == 4
    assert all(line.endswith(",3") for line in lines[1:])
