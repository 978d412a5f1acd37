import numpy as np
import pytest
from numpy.testing import assert_allclose

from lapselab.survival import concordance_index, cox_loss, cox_loss_gradient, cox_partial_likelihood, fit_gbsm


def test_loss_is_negative_partial_likelihood(rng):
    X = rng.normal(size=(50, 1))
    t = rng.integers(1, 6, 50).astype(float)
    e = rng.random(50) < 0.7
    f = X[:, 0] * 0.8
    assert cox_loss(f, t, e) == pytest.approx(-cox_partial_likelihood([0.8], X, t, e, 0), rel=1e-12)


def test_gradient_matches_finite_differences(rng):
    t = rng.integers(1, 8, 25).astype(float)
    e = rng.random(25) < 0.6
    f = rng.normal(size=25)
    g = cox_loss_gradient(f, t, e)
    h = 1e-6
    num = np.array([(cox_loss(f + h * np.eye(25)[i], t, e) - cox_loss(f - h * np.eye(25)[i], t, e)) / (2 * h) for i in range(25)])
    assert_allclose(g, num, atol=1e-6)
    assert g.sum() == pytest.approx(0.0, abs=1e-10)


def test_training_loss_never_increases(portfolio):
    d = portfolio
    m = fit_gbsm(d.features, d.durations, d.events > 0, n_stages=25, subsample=0.5, seed=1)
    assert np.all(np.diff(m.train_loss) <= 1e-9)
    assert m.train_loss[-1] < m.train_loss[0]


def test_zero_stages_is_uninformative(portfolio):
    d = portfolio
    m = fit_gbsm(d.features, d.durations, d.events > 0, n_stages=0)
    assert concordance_index(d.durations, d.events > 0, m.risk_score(d.features)) == 0.5


def test_deterministic_given_seed(portfolio):
    d = portfolio
    kw = dict(n_stages=10, subsample=0.7, seed=4)
    a = fit_gbsm(d.features, d.durations, d.events > 0, **kw)
    b = fit_gbsm(d.features, d.durations, d.events > 0, **kw)
    assert_allclose(a.risk_score(d.features), b.risk_score(d.features), rtol=0, atol=0)


def test_learns_step_effect():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(1500, 2))
    risk = np.where(X[:, 0] > 0.3, 1.5, 0.0)
    t = rng.exponential(1 / np.exp(risk))
    m = fit_gbsm(X, t, np.ones(1500, bool), n_stages=30, max_depth=2)
    score = m.risk_score(X)
    assert score[X[:, 0] > 0.4].mean() - score[X[:, 0] < 0.2].mean() > 0.8
