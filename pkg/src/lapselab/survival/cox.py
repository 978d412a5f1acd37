"""Cox proportional hazards with Breslow ties and a Breslow step baseline."""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass

import numpy as np

from .base import CauseRecoding, as_time_matrix, check_features, prepare
from .nonparametric import StepFunction, risk_table


class CoxFitError(RuntimeError):
    pass


class NonConvergence(CoxFitError):
    def __init__(self, iterations: int, grad_norm: float):
        super().__init__(f"Newton-Raphson did not converge in {iterations} iterations (|grad|={grad_norm:.3g})")
        self.iterations = iterations


class SeparationDetected(CoxFitError):
    pass


def _risk_set_ends(durations_desc: np.ndarray) -> np.ndarray:
    # last position whose duration equals the current one (descending order)
    neg = -durations_desc
    return np.searchsorted(neg, neg, side="right") - 1


def cox_partial_likelihood(beta, X, durations, events, order: int = 2):
    """Breslow log partial likelihood and optionally its gradient and Hessian.

    Returns ``ll`` for ``order=0``, ``(ll, grad)`` for 1, ``(ll, grad, hess)``
    for 2.
    """
    beta = np.asarray(beta, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    durations = np.asarray(durations, dtype=float)
    events = np.asarray(events).astype(bool)
    idx = np.argsort(-durations, kind="stable")
    Xs, ev = X[idx], events[idx]
    ends = _risk_set_ends(durations[idx])[ev]
    eta = Xs @ beta if beta.size else np.zeros(len(idx))
    m = eta.max() if eta.size else 0.0
    w = np.exp(eta - m)
    s0 = np.cumsum(w)[ends]
    ll = float(np.sum(eta[ev] - m - np.log(s0)))
    if order == 0:
        return ll
    wx = w[:, None] * Xs
    s1 = np.cumsum(wx, axis=0)[ends]
    xbar = s1 / s0[:, None]
    grad = Xs[ev].sum(axis=0) - xbar.sum(axis=0)
    if order == 1:
        return ll, grad
    s2 = np.cumsum(wx[:, :, None] * Xs[:, None, :], axis=0)[ends]
    hess = -(s2 / s0[:, None, None]).sum(axis=0) + np.einsum("ki,kj->ij", xbar, xbar)
    return ll, grad, hess


@dataclass(frozen=True)
class CoxModel:
    """Fitted Cox model; risk score is ``(x - center) @ beta``."""

    beta: np.ndarray
    center: np.ndarray
    baseline_cumhaz: StepFunction
    feature_names: tuple
    log_likelihood: float = float("nan")
    n_iter: int = 0
    selected: tuple = ()
    recoding: CauseRecoding | None = None

    kind = "cox"

    @property
    def n_params(self) -> int:
        return int(np.count_nonzero(np.asarray(self.selected))) if len(self.selected) else len(self.beta)

    @property
    def aic(self) -> float:
        return 2.0 * self.n_params - 2.0 * self.log_likelihood

    def risk_score(self, X) -> np.ndarray:
        X = check_features(self.feature_names, X)
        return (X - self.center) @ self.beta

    def predict_cumulative_hazard(self, X, times) -> np.ndarray:
        X = check_features(self.feature_names, X)
        t, _ = as_time_matrix(times, X.shape[0])
        return self.baseline_cumhaz(t) * np.exp(self.risk_score(X))[:, None]

    def predict_survival(self, X, times) -> np.ndarray:
        return np.exp(-self.predict_cumulative_hazard(X, times))


def breslow_baseline(risk, durations, events) -> StepFunction:
    """Breslow cumulative baseline hazard at the given linear predictors."""
    times, d, _ = risk_table(durations, events)
    w = np.exp(risk)
    order = np.argsort(durations, kind="stable")
    tail = np.cumsum(w[order][::-1])[::-1]  # sum of w over durations >= sorted position
    start = np.searchsorted(durations[order], times, side="left")
    denom = tail[start] if times.size else np.empty(0)
    return StepFunction(times, np.cumsum(d / denom), 0.0)


def fit_cox(
    X,
    durations,
    events,
    *,
    recoding: CauseRecoding | None = None,
    feature_names=None,
    max_iter: int = 100,
    tol: float = 1e-6,
    ridge: float = 0.0,
    columns=None,
) -> CoxModel:
    """Maximize the Breslow partial likelihood by damped Newton-Raphson.

    Covariates are standardized internally; ``ridge`` penalizes the
    standardized coefficients (``ridge/2 * |gamma|^2``) and ``tol`` bounds the
    max-norm of the penalized gradient on that scale.  ``columns`` restricts
    the fit to a subset of covariates; excluded coefficients are fixed at 0.
    """
    X, durations, events = prepare(X, durations, events, recoding)
    n, p = X.shape
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise ValueError("feature_names length must match X columns")
    if events.sum() < 2:
        raise CoxFitError("need at least 2 events to fit a Cox model")
    mask = np.ones(p, dtype=bool) if columns is None else np.isin(np.arange(p), list(columns))
    center = X.mean(axis=0)
    Xa = X[:, mask]
    scale = Xa.std(axis=0)
    if np.any(scale == 0):
        raise CoxFitError("constant covariate(s): " + ", ".join(np.array(names)[mask][scale == 0]))
    Z = (Xa - center[mask]) / scale
    k = Z.shape[1]
    gamma = np.zeros(k)

    def penalized(g, order):
        out = cox_partial_likelihood(g, Z, durations, events, order)
        if order == 0:
            return out - 0.5 * ridge * g @ g
        ll, grad, *h = out
        ll -= 0.5 * ridge * g @ g
        grad = grad - ridge * g
        if h:
            return ll, grad, h[0] - ridge * np.eye(k)
        return ll, grad

    it = 0
    ll, grad, hess = penalized(gamma, 2)
    gnorm = float(np.max(np.abs(grad))) if k else 0.0
    while k and gnorm > tol:
        if it >= max_iter:
            raise NonConvergence(it, gnorm)
        it += 1
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(40):
            cand = gamma + t * step
            ll_new = penalized(cand, 0)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        gamma = cand
        ll, grad, hess = penalized(gamma, 2)
        gnorm = float(np.max(np.abs(grad)))
        if ridge == 0 and np.max(np.abs(gamma)) > 20.0:
            raise SeparationDetected(
                "coefficients diverging (monotone likelihood); "
                "covariates separate events, consider ridge > 0"
            )
    if ridge == 0:
        # at a finite optimum doubling any coefficient lowers the (concave) likelihood
        for j in np.flatnonzero(np.abs(gamma) > 1.0):
            bumped = gamma.copy()
            bumped[j] *= 2.0
            if penalized(bumped, 0) >= ll:
                raise SeparationDetected(
                    f"likelihood is monotone in {np.array(names)[mask][j]} (covariate separates events); "
                    "consider ridge > 0"
                )
    beta = np.zeros(p)
    beta[mask] = gamma / scale
    risk = (X - center) @ beta
    baseline = breslow_baseline(risk, durations, events)
    return CoxModel(
        beta=beta,
        center=center,
        baseline_cumhaz=baseline,
        feature_names=names,
        log_likelihood=cox_partial_likelihood(gamma, Z, durations, events, 0),
        n_iter=it,
        selected=tuple(bool(v) for v in mask),
        recoding=recoding,
    )


def select_cox_covariates(X, durations, events, *, feature_names, groups: dict, recoding=None, **fit_kw):
    """Best-subset covariate selection by AIC over covariate groups.

    ``groups`` maps a covariate name to its encoded column names.  Returns the
    best model and a list of ``(group subset, aic)`` for every subset tried.
    Subsets whose fit fails (e.g. a constant column) are skipped.
    """
    names = list(feature_names)
    X, durations, events = prepare(X, durations, events, recoding)
    group_cols = {g: [names.index(c) for c in cols] for g, cols in groups.items()}
    table = []
    best = None
    for r in range(len(groups) + 1):
        for subset in itertools.combinations(groups, r):
            cols = sorted(c for g in subset for c in group_cols[g])
            try:
                model = fit_cox(X, durations, events, feature_names=names, columns=cols, **fit_kw)
            except CoxFitError:
                continue
            model = dataclasses.replace(model, recoding=recoding)
            table.append((subset, model.aic))
            if best is None or model.aic < best.aic - 1e-12:
                best = model
    if best is None:
        raise CoxFitError("no covariate subset could be fitted")
    return best, table

