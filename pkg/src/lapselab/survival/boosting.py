"""Gradient boosting on the Cox partial-likelihood loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.tree import DecisionTreeRegressor

from .base import CauseRecoding, as_time_matrix, check_features, prepare
from .cox import breslow_baseline
from .nonparametric import StepFunction


class NonFiniteLoss(FloatingPointError):
    pass


class _RiskSets:
    """Sort order and tie bookkeeping for risk sets {j : T_j >= T_i}."""

    def __init__(self, durations, events):
        self.order = np.argsort(durations, kind="stable")
        t = durations[self.order]
        self.events = events[self.order]
        self.first = np.searchsorted(t, t, side="left")  # first index of each tie group
        self.last = np.searchsorted(t, t, side="right") - 1

    def tail_sums(self, v):
        """sum of v over each sorted subject's risk set, shape of v (sorted order)."""
        tail = np.cumsum(v[::-1], axis=0)[::-1]
        return tail[self.first]


def cox_loss(scores, durations, events) -> float:
    """Negative Breslow log partial likelihood of the risk scores."""
    scores = np.asarray(scores, dtype=float)
    rs = _RiskSets(np.asarray(durations, float), np.asarray(events, bool))
    f = scores[rs.order]
    m = f.max()
    s0 = rs.tail_sums(np.exp(f - m))
    ev = rs.events
    return float(-np.sum(f[ev] - m - np.log(s0[ev])))


def cox_loss_gradient(scores, durations, events) -> np.ndarray:
    """Gradient of :func:`cox_loss` with respect to each subject's score."""
    scores = np.asarray(scores, dtype=float)
    rs = _RiskSets(np.asarray(durations, float), np.asarray(events, bool))
    f = scores[rs.order]
    w = np.exp(f - f.max())
    s0 = rs.tail_sums(w)
    inv = np.where(rs.events, 1.0 / s0, 0.0)
    acc = np.cumsum(inv)[rs.last]  # sum of 1/S_i over events with T_i <= T_k
    g_sorted = w * acc - rs.events
    g = np.empty_like(g_sorted)
    g[rs.order] = g_sorted
    return g


def _line_search(rs: _RiskSets, f_sorted, h_sorted, max_iter=30, tol=1e-10) -> float:
    """Minimize the (convex) loss along ``f + rho * h``."""
    ev = rs.events

    def parts(rho):
        g = f_sorted + rho * h_sorted
        m = g.max()
        w = np.exp(g - m)
        s0 = rs.tail_sums(w)[ev]
        s1 = rs.tail_sums(w * h_sorted)[ev]
        s2 = rs.tail_sums(w * h_sorted**2)[ev]
        loss = -np.sum(g[ev] - m - np.log(s0))
        mean = s1 / s0
        d1 = -np.sum(h_sorted[ev] - mean)
        d2 = np.sum(s2 / s0 - mean**2)
        return loss, d1, d2

    rho = 0.0
    loss, d1, d2 = parts(rho)
    for _ in range(max_iter):
        if d2 <= 0 or abs(d1) <= tol * max(1.0, abs(loss)):
            break
        step = -d1 / d2
        for _ in range(40):
            cand = parts(rho + step)
            if np.isfinite(cand[0]) and cand[0] <= loss:
                break
            step *= 0.5
        else:
            break
        rho += step
        loss, d1, d2 = cand
        if abs(step) < 1e-12:
            break
    return rho


@dataclass
class RegressionTree:
    """Array form of a fitted regression tree (``x[feature] <= threshold`` goes left)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @classmethod
    def from_sklearn(cls, est: DecisionTreeRegressor, scale: float = 1.0) -> "RegressionTree":
        t = est.tree_
        return cls(
            feature=np.where(t.children_left >= 0, t.feature, -1).astype(np.int64),
            threshold=t.threshold.astype(float),
            left=t.children_left.astype(np.int64),
            right=t.children_right.astype(np.int64),
            value=t.value[:, 0, 0].astype(float) * scale,
        )

    def predict(self, X) -> np.ndarray:
        # sklearn compares float32-cast features against float64 thresholds
        X = np.asarray(X, dtype=np.float32)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            internal = self.feature[node] >= 0
            if not internal.any():
                break
            nd = node[internal]
            go_left = X[rows[internal], self.feature[nd]] <= self.threshold[nd]
            node[internal] = np.where(go_left, self.left[nd], self.right[nd])
        return self.value[node]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d) -> "RegressionTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=float),
        )


@dataclass
class GradientBoostedSurvival:
    """Risk score ``f(x) = base_score + sum of stage outputs`` with a Breslow baseline."""

    base_score: float
    stages: list
    baseline_cumhaz: StepFunction
    feature_names: tuple
    train_loss: list = field(default_factory=list)
    recoding: CauseRecoding | None = None
    params: dict = field(default_factory=dict)

    kind = "gbsm"

    def risk_score(self, X) -> np.ndarray:
        X = check_features(self.feature_names, X)
        f = np.full(X.shape[0], self.base_score, dtype=float)
        for stage in self.stages:
            f += stage.predict(X)
        return f

    def predict_cumulative_hazard(self, X, times) -> np.ndarray:
        X = check_features(self.feature_names, X)
        t, _ = as_time_matrix(times, X.shape[0])
        return self.baseline_cumhaz(t) * np.exp(self.risk_score(X))[:, None]

    def predict_survival(self, X, times) -> np.ndarray:
        return np.exp(-self.predict_cumulative_hazard(X, times))


def fit_gbsm(
    X,
    durations,
    events,
    *,
    recoding: CauseRecoding | None = None,
    feature_names=None,
    n_stages: int = 100,
    learning_rate: float = 0.1,
    max_depth: int = 3,
    min_leaf: int = 10,
    subsample: float = 1.0,
    seed: int = 0,
) -> GradientBoostedSurvival:
    """Stagewise boosting of regression trees on the Cox loss.

    Every stage fits a tree to the negative loss gradient (on a row subsample
    when ``subsample < 1``), finds the loss-minimizing multiplier along the
    tree's output on the full training set and adds ``learning_rate`` times
    that step.  Because the loss is convex along the step, the training loss
    never increases.
    """
    X, durations, events = prepare(X, durations, events, recoding)
    n, p = X.shape
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(p))
    if events.sum() < 2:
        raise ValueError("need at least 2 events")
    if not 0 < subsample <= 1:
        raise ValueError("subsample must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    rs = _RiskSets(durations, events)
    f = np.zeros(n)
    losses = [cox_loss(f, durations, events)]
    stages = []
    n_sub = max(2, int(round(subsample * n)))
    for _ in range(int(n_stages)):
        grad = cox_loss_gradient(f, durations, events)
        rows = np.sort(rng.choice(n, n_sub, replace=False)) if n_sub < n else np.arange(n)
        est = DecisionTreeRegressor(
            max_depth=max_depth,
            min_samples_leaf=min_leaf,
            random_state=int(rng.integers(2**31 - 1)),
        )
        est.fit(X[rows], -grad[rows])
        tree = RegressionTree.from_sklearn(est)
        h = tree.predict(X)
        rho = _line_search(rs, f[rs.order], h[rs.order]) if np.any(h != 0) else 0.0
        step = learning_rate * rho
        new_loss = cox_loss(f + step * h, durations, events)
        if not np.isfinite(new_loss):
            raise NonFiniteLoss("loss became non-finite")
        if new_loss > losses[-1]:
            step, new_loss = 0.0, losses[-1]
        tree.value = tree.value * step
        f = f + step * h
        stages.append(tree)
        losses.append(new_loss)
    return GradientBoostedSurvival(
        base_score=0.0,
        stages=stages,
        baseline_cumhaz=breslow_baseline(f, durations, events),
        feature_names=names,
        train_loss=losses,
        recoding=recoding,
        params=dict(
            n_stages=n_stages,
            learning_rate=learning_rate,
            max_depth=max_depth,
            min_leaf=min_leaf,
            subsample=subsample,
            seed=seed,
        ),
    )
