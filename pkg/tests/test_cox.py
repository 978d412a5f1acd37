import numpy as np
import pytest
from numpy.testing import assert_allclose

from lapselab.survival import (
    CoxFitError,
    SeparationDetected,
    cox_partial_likelihood,
    fit_cox,
    kaplan_meier,
    nelson_aalen,
    select_cox_covariates,
)
from lapselab.survival.base import SchemaMismatch


def _ph_sample(rng, n, beta, censor_rate=0.3):
    X = rng.normal(size=(n, len(beta)))
    t = rng.exponential(1.0 / np.exp(X @ np.asarray(beta)))
    c = rng.exponential(1.0 / censor_rate, n)
    return X, np.minimum(t, c), t <= c


def _brute_loglik(beta, X, t, e):
    eta = X @ beta
    return sum(eta[i] - np.log(np.exp(eta[t >= t[i]]).sum()) for i in np.flatnonzero(e))


def test_partial_likelihood_matches_direct_sum(rng):
    X = rng.normal(size=(30, 3))
    t = rng.integers(1, 8, 30).astype(float)  # heavy ties
    e = rng.random(30) < 0.7
    beta = np.array([0.3, -0.5, 0.1])
    assert cox_partial_likelihood(beta, X, t, e, 0) == pytest.approx(_brute_loglik(beta, X, t, e), rel=1e-12)


def test_gradient_and_hessian_match_finite_differences(rng):
    X = rng.normal(size=(40, 3))
    t = rng.integers(1, 10, 40).astype(float)
    e = rng.random(40) < 0.6
    beta = np.array([0.2, -0.4, 0.7])
    _, grad, hess = cox_partial_likelihood(beta, X, t, e, 2)
    h = 1e-6
    num_grad = np.empty(3)
    num_hess = np.empty((3, 3))
    for j in range(3):
        step = np.eye(3)[j] * h
        num_grad[j] = (cox_partial_likelihood(beta + step, X, t, e, 0) - cox_partial_likelihood(beta - step, X, t, e, 0)) / (2 * h)
        num_hess[j] = (cox_partial_likelihood(beta + step, X, t, e, 1)[1] - cox_partial_likelihood(beta - step, X, t, e, 1)[1]) / (2 * h)
    assert_allclose(grad, num_grad, rtol=1e-6, atol=1e-6)
    assert_allclose(hess, num_hess, rtol=1e-5, atol=1e-5)


def test_recovers_planted_coefficient():
    X, t, e = _ph_sample(np.random.default_rng(0), 10000, [0.7])
    m = fit_cox(X, t, e)
    assert abs(m.beta[0] - 0.7) < 0.05


def test_null_effect_is_near_zero():
    X, t, e = _ph_sample(np.random.default_rng(1), 5000, [0.0, 0.0])
    assert np.all(np.abs(fit_cox(X, t, e).beta) < 0.05)


def test_zero_coefficients_give_identical_predictions(rng):
    X = rng.normal(size=(200, 2))
    t = rng.exponential(1, 200)
    e = rng.random(200) < 0.8
    m = fit_cox(X, t, e, columns=[])
    S = m.predict_survival(X[:5], [0.5, 1.0, 2.0])
    assert_allclose(S, np.broadcast_to(S[0], S.shape))


def test_null_model_baseline_is_nelson_aalen(rng):
    t = rng.exponential(1, 300)
    e = rng.random(300) < 0.7
    X = rng.normal(size=(300, 1))
    m = fit_cox(X, t, e, columns=[])
    grid = np.linspace(0, 3, 13)
    assert_allclose(m.baseline_cumhaz(grid), nelson_aalen(t, e)(grid), rtol=1e-12)
    assert np.all(m.predict_survival(X[:1], grid)[0] >= kaplan_meier(t, e)(grid) - 1e-12)


def test_separation_is_detected():
    x = np.r_[np.zeros(20), np.ones(20)]
    t = np.r_[np.arange(21, 41), np.arange(1, 21)].astype(float)
    e = np.ones(40, bool)
    with pytest.raises(SeparationDetected):
        fit_cox(x[:, None], t, e)
    m = fit_cox(x[:, None], t, e, ridge=1.0)
    assert np.isfinite(m.beta).all() and m.beta[0] > 0


def test_constant_covariate_and_too_few_events(rng):
    X = np.ones((10, 1))
    with pytest.raises(CoxFitError):
        fit_cox(X, np.arange(1, 11.0), np.ones(10, bool))
    with pytest.raises(CoxFitError):
        fit_cox(rng.normal(size=(10, 1)), np.arange(1, 11.0), np.r_[True, np.zeros(9, bool)])


def test_schema_checked_at_prediction(rng):
    X, t, e = _ph_sample(rng, 100, [0.5, 0.5])
    m = fit_cox(X, t, e)
    with pytest.raises(SchemaMismatch):
        m.predict_survival(X[:, :1], [1.0])


def test_aic_selection_drops_noise_groups():
    rng = np.random.default_rng(3)
    X, t, e = _ph_sample(rng, 3000, [0.8, 0.0, 0.0])
    names = ["a", "b", "c"]
    groups = {"a": ["a"], "b": ["b"], "c": ["c"]}
    best, table = select_cox_covariates(X, t, e, feature_names=names, groups=groups)
    assert len(table) == 8
    assert best.selected[0]
    assert best.aic == pytest.approx(min(a for _, a in table))
    # exhaustive oracle: refit every subset independently
    aics = {}
    for subset, aic in table:
        cols = [names.index(g) for g in subset]
        aics[subset] = fit_cox(X, t, e, columns=cols).aic
        assert aics[subset] == pytest.approx(aic)
