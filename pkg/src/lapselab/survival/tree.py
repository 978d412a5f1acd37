"""Survival trees grown by log-rank splitting, and random survival forests."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .._parallel import worker_count
from .base import CauseRecoding, TooFewSamples, as_time_matrix, check_features, prepare
from .nonparametric import StepFunction, kaplan_meier, nelson_aalen

_MIN_STAT = 1e-10


@dataclass
class _NodeData:
    t: np.ndarray
    e: np.ndarray
    tk: np.ndarray  # distinct event times in the node
    r: np.ndarray  # number of event times <= t_i (subject at risk at tk[:r_i])
    ev: np.ndarray  # index of t_i in tk, valid for events
    Y: np.ndarray  # at-risk counts at tk
    D: np.ndarray  # event counts at tk

    @classmethod
    def build(cls, t, e):
        tk = np.unique(t[e])
        K = tk.size
        r = np.searchsorted(tk, t, side="right")
        ev = np.searchsorted(tk, t, side="left")
        Y = t.size - np.cumsum(np.bincount(r, minlength=K + 1))[:K]
        D = np.bincount(ev[e], minlength=K)[:K] if K else np.zeros(0, int)
        return cls(t, e, tk, r, ev, Y.astype(float), D.astype(float))


def candidate_thresholds(x: np.ndarray, max_thresholds: int | None) -> np.ndarray:
    """Midpoints between distinct values, thinned to at most ``max_thresholds``."""
    u = np.unique(x)
    if u.size < 2:
        return u[:0]
    mids = (u[:-1] + u[1:]) / 2.0
    if max_thresholds is not None and mids.size > max_thresholds:
        pick = np.unique(np.linspace(0, mids.size - 1, max_thresholds).round().astype(int))
        mids = mids[pick]
    return mids


def logrank_scan(x, node: _NodeData, thresholds, min_leaf: int) -> np.ndarray:
    """Log-rank statistic of the split ``x <= thr`` for every threshold.

    Splits leaving fewer than ``min_leaf`` subjects on a side get -inf.
    """
    J, K, n = thresholds.size, node.tk.size, x.size
    if J == 0:
        return np.empty(0)
    b = np.searchsorted(thresholds, x, side="left")  # left of threshold j iff b <= j
    n_left = np.cumsum(np.bincount(b, minlength=J + 1))[:J]
    valid = (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if K == 0:
        return np.where(valid, 0.0, -np.inf)
    at_risk = np.bincount(b * (K + 1) + node.r, minlength=(J + 1) * (K + 1)).reshape(J + 1, K + 1)
    at_risk = np.cumsum(at_risk, axis=0)[:J]
    YL = np.cumsum(at_risk[:, ::-1], axis=1)[:, ::-1][:, 1:].astype(float)
    eb = b[node.e]
    DL = np.bincount(eb * K + node.ev[node.e], minlength=(J + 1) * K).reshape(J + 1, K)
    DL = np.cumsum(DL, axis=0)[:J]
    Y, D = node.Y, node.D
    frac = YL / Y
    obs_minus_exp = (DL - D * frac).sum(axis=1)
    var_factor = np.where(Y > 1, D * (Y - D) / np.maximum(Y - 1.0, 1.0), 0.0)
    var = (frac * (1.0 - frac) * var_factor).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(var > 0, obs_minus_exp**2 / var, 0.0)
    return np.where(valid, stat, -np.inf)


def _resolve_mtry(features_per_split, p: int) -> int:
    if features_per_split is None:
        return p
    if features_per_split == "sqrt":
        return max(1, int(np.sqrt(p)))
    if isinstance(features_per_split, float):
        return max(1, min(p, int(round(features_per_split * p))))
    m = int(features_per_split)
    if not 1 <= m <= p:
        raise ValueError(f"features_per_split must lie in [1, {p}]")
    return m


@dataclass
class SurvivalTree:
    """Binary tree; internal nodes split on ``x[feature] <= threshold``.

    Each leaf holds the Kaplan-Meier and Nelson-Aalen estimates of its
    training subjects.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_of_node: np.ndarray
    leaf_survival: list
    leaf_cumhaz: list
    leaf_sizes: np.ndarray
    feature_names: tuple
    unique_times: np.ndarray
    recoding: CauseRecoding | None = None

    kind = "tree"

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_survival)

    def apply(self, X) -> np.ndarray:
        X = check_features(self.feature_names, X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            internal = self.feature[node] >= 0
            if not internal.any():
                break
            nd = node[internal]
            go_left = X[rows[internal], self.feature[nd]] <= self.threshold[nd]
            node[internal] = np.where(go_left, self.left[nd], self.right[nd])
        return self.leaf_of_node[node]

    def _evaluate(self, funcs, X, times) -> np.ndarray:
        leaf = self.apply(X)
        t, shared = as_time_matrix(times, leaf.size)
        if shared:
            table = np.stack([f(t[0]) for f in funcs]) if funcs else np.empty((0, t.shape[1]))
            return table[leaf]
        out = np.empty(t.shape)
        order = np.argsort(leaf, kind="stable")
        cuts = np.flatnonzero(np.diff(leaf[order])) + 1
        for rows in np.split(order, cuts):
            if rows.size:
                out[rows] = funcs[leaf[rows[0]]](t[rows])
        return out

    def predict_survival(self, X, times) -> np.ndarray:
        return self._evaluate(self.leaf_survival, X, times)

    def predict_cumulative_hazard(self, X, times) -> np.ndarray:
        return self._evaluate(self.leaf_cumhaz, X, times)

    def risk_score(self, X, grid=None) -> np.ndarray:
        """Expected number of events: cumulative hazard summed over ``grid``."""
        grid = self.unique_times if grid is None else grid
        per_leaf = np.array([f(grid).sum() for f in self.leaf_cumhaz])
        return per_leaf[self.apply(X)]


def _grow(X, node: _NodeData, depth, opts, rng, out):
    nid = len(out["feature"])
    for key, val in (("feature", -1), ("threshold", np.nan), ("left", -1), ("right", -1), ("leaf", -1)):
        out[key].append(val)
    n = node.t.size
    best = None
    can_split = (
        n >= 2 * opts["min_leaf"]
        and (opts["max_depth"] is None or depth < opts["max_depth"])
        and node.tk.size > 0
    )
    if can_split:
        p = X.shape[1]
        feats = np.arange(p) if opts["mtry"] >= p else np.sort(rng.choice(p, opts["mtry"], replace=False))
        for j in feats:
            thr = candidate_thresholds(X[:, j], opts["max_thresholds"])
            stats = logrank_scan(X[:, j], node, thr, opts["min_leaf"])
            if stats.size == 0:
                continue
            k = int(np.argmax(stats))
            if stats[k] > _MIN_STAT and (best is None or stats[k] > best[0]):
                best = (float(stats[k]), int(j), float(thr[k]))
    if best is None:
        out["leaf"][nid] = len(out["leaves"])
        out["leaves"].append((node.t, node.e))
        return nid
    _, j, thr = best
    mask = X[:, j] <= thr
    out["feature"][nid] = j
    out["threshold"][nid] = thr
    for side, m in (("left", mask), ("right", ~mask)):
        child = _NodeData.build(node.t[m], node.e[m])
        out[side][nid] = _grow(X[m], child, depth + 1, opts, rng, out)
    return nid


def fit_survival_tree(
    X,
    durations,
    events,
    *,
    recoding: CauseRecoding | None = None,
    feature_names=None,
    min_leaf: int = 15,
    max_depth: int | None = None,
    features_per_split=None,
    max_thresholds: int | None = 64,
    seed=0,
    unique_times=None,
) -> SurvivalTree:
    """Grow a survival tree greedily, maximizing the log-rank statistic.

    At each node every (feature, threshold) candidate among the sampled
    features is scored; the best strictly positive statistic wins (first
    feature, then lowest threshold, on ties).  ``max_thresholds`` caps the
    candidate thresholds per feature (evenly spaced over the distinct-value
    midpoints); ``None`` searches all of them.
    """
    X, durations, events = prepare(X, durations, events, recoding)
    n, p = X.shape
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    if n < 2 * min_leaf:
        raise TooFewSamples(f"need at least 2*min_leaf={2 * min_leaf} samples, got {n}")
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(p))
    opts = dict(
        min_leaf=int(min_leaf),
        max_depth=max_depth,
        mtry=_resolve_mtry(features_per_split, p),
        max_thresholds=max_thresholds,
    )
    rng = np.random.default_rng(seed)
    out = {"feature": [], "threshold": [], "left": [], "right": [], "leaf": [], "leaves": []}
    _grow(X, _NodeData.build(durations, events), 0, opts, rng, out)
    if unique_times is None:
        unique_times = np.unique(durations[events])
    return SurvivalTree(
        feature=np.array(out["feature"], dtype=np.int64),
        threshold=np.array(out["threshold"], dtype=float),
        left=np.array(out["left"], dtype=np.int64),
        right=np.array(out["right"], dtype=np.int64),
        leaf_of_node=np.array(out["leaf"], dtype=np.int64),
        leaf_survival=[kaplan_meier(t, e) for t, e in out["leaves"]],
        leaf_cumhaz=[nelson_aalen(t, e) for t, e in out["leaves"]],
        leaf_sizes=np.array([t.size for t, _ in out["leaves"]], dtype=np.int64),
        feature_names=names,
        unique_times=np.asarray(unique_times, dtype=float),
        recoding=recoding,
    )


@dataclass
class SurvivalForest:
    """Bagged survival trees; predictions are pointwise means over trees."""

    trees: list
    tree_seeds: list
    features_per_split: object
    bootstrap: bool
    feature_names: tuple
    unique_times: np.ndarray
    recoding: CauseRecoding | None = None
    params: dict = field(default_factory=dict)

    kind = "forest"

    def predict_survival(self, X, times) -> np.ndarray:
        return np.mean([t.predict_survival(X, times) for t in self.trees], axis=0)

    def predict_cumulative_hazard(self, X, times) -> np.ndarray:
        return np.mean([t.predict_cumulative_hazard(X, times) for t in self.trees], axis=0)

    def risk_score(self, X) -> np.ndarray:
        return np.mean([t.risk_score(X, self.unique_times) for t in self.trees], axis=0)


def _fit_member(X, durations, events, seed, bootstrap, kw):
    rng = np.random.default_rng(seed)
    if bootstrap:
        idx = rng.integers(0, durations.size, durations.size)
        X, durations, events = X[idx], durations[idx], events[idx]
    return fit_survival_tree(X, durations, events, seed=rng, **kw)


def fit_rsf(
    X,
    durations,
    events,
    *,
    recoding: CauseRecoding | None = None,
    feature_names=None,
    n_trees: int = 100,
    min_leaf: int = 15,
    max_depth: int | None = None,
    features_per_split="sqrt",
    max_thresholds: int | None = 64,
    bootstrap: bool = True,
    seed: int = 0,
    n_jobs: int | None = None,
) -> SurvivalForest:
    """Random survival forest.

    Tree ``k`` draws its bootstrap sample and split features from
    ``default_rng(tree_seeds[k])``; the seeds come from ``seed`` alone, so
    the forest does not depend on the number of workers.
    """
    X, durations, events = prepare(X, durations, events, recoding)
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if durations.size < 2 * min_leaf:
        raise TooFewSamples(f"need at least 2*min_leaf={2 * min_leaf} samples, got {durations.size}")
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n_trees, dtype=np.uint64)]
    unique_times = np.unique(durations[events])
    kw = dict(
        feature_names=names,
        min_leaf=min_leaf,
        max_depth=max_depth,
        features_per_split=features_per_split,
        max_thresholds=max_thresholds,
        unique_times=unique_times,
    )
    jobs = worker_count(n_jobs)
    if jobs == 1:
        trees = [_fit_member(X, durations, events, s, bootstrap, kw) for s in seeds]
    else:
        trees = Parallel(n_jobs=jobs)(delayed(_fit_member)(X, durations, events, s, bootstrap, kw) for s in seeds)
    for t in trees:
        t.recoding = recoding
    return SurvivalForest(
        trees=list(trees),
        tree_seeds=seeds,
        features_per_split=features_per_split,
        bootstrap=bootstrap,
        feature_names=names,
        unique_times=unique_times,
        recoding=recoding,
        params=dict(n_trees=n_trees, min_leaf=min_leaf, max_depth=max_depth, max_thresholds=max_thresholds),
    )
