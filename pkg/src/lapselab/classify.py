"""Tree-based binary classifiers and cross-validated tuning on statistical or profit metrics."""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.tree import DecisionTreeClassifier

from .portfolio import kfold_split
from .survival.base import SchemaMismatch
from .valuation import StrategyParams, retention_gain
from .survival.retention import RetentionMatrices


class DegenerateLabels(UserWarning):
    """Training labels contain a single class; a constant classifier is used."""


class UndefinedMetric(ValueError):
    pass


class NotFitted(RuntimeError):
    pass


def _check_binary(y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be a 1-d binary vector")
    return y.astype(np.int8)


class _Classifier:
    """fit / predict_proba / predict plumbing shared by every family."""

    family = ""

    def _params(self) -> dict:
        raise NotImplementedError

    def _fit(self, X, y):
        raise NotImplementedError

    def _scores(self, X) -> np.ndarray:
        raise NotImplementedError

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = _check_binary(y)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ValueError("X must be (n, p) aligned with y")
        self.n_features_ = X.shape[1]
        classes = np.unique(y)
        if classes.size < 2:
            if self.family != "zero":
                warnings.warn(
                    f"{self.family}: single-class labels, predicting constant {int(classes[0]) if classes.size else 0}",
                    DegenerateLabels,
                    stacklevel=2,
                )
            self.constant_ = float(classes[0]) if classes.size else 0.0
        else:
            self.constant_ = None
            self._fit(X, y)
        return self

    def _check(self, X) -> np.ndarray:
        if not hasattr(self, "n_features_"):
            raise NotFitted(f"{type(self).__name__} is not fitted")
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features_:
            raise SchemaMismatch(f"expected {self.n_features_} features, got {X.shape}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        """Score in [0, 1] for class 1."""
        X = self._check(X)
        if self.constant_ is not None:
            return np.full(X.shape[0], self.constant_)
        return self._scores(X)

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.int8)

    def get_params(self) -> dict:
        return dict(self._params())

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self._params().items())
        return f"{type(self).__name__}({args})"


def _tree_proba(est: DecisionTreeClassifier, X) -> np.ndarray:
    if est.classes_.size == 1:
        return np.full(X.shape[0], float(est.classes_[0]))
    return est.predict_proba(X)[:, 1]


def _tree(max_depth, min_leaf, features_per_split, seed, class_weight) -> DecisionTreeClassifier:
    return DecisionTreeClassifier(
        criterion="gini",
        max_depth=max_depth,
        min_samples_leaf=min_leaf,
        max_features=features_per_split,
        class_weight=class_weight,
        random_state=int(seed) % 2**32,
    )


class ConstantClassifier(_Classifier):
    """Predicts the same label for everyone; ``value=0`` is the do-nothing strategy."""

    family = "zero"

    def __init__(self, value: int = 0):
        self.value = int(value)

    def _params(self):
        return {"value": self.value}

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        self.n_features_ = X.shape[1]
        self.constant_ = float(self.value)
        return self


class CARTClassifier(_Classifier):
    """Single Gini-impurity decision tree."""

    family = "cart"

    def __init__(self, max_depth=None, min_leaf=1, features_per_split=None, seed=0, class_weight=None):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.features_per_split = features_per_split
        self.seed = seed
        self.class_weight = class_weight

    def _params(self):
        return {
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "features_per_split": self.features_per_split,
            "seed": self.seed,
            "class_weight": self.class_weight,
        }

    def _fit(self, X, y):
        self.tree_ = _tree(self.max_depth, self.min_leaf, self.features_per_split, self.seed, self.class_weight)
        self.tree_.fit(X, y)

    def _scores(self, X):
        return _tree_proba(self.tree_, X)


class RandomForestClassifier(_Classifier):
    """Bagged CART trees with per-split feature subsampling and majority vote.

    The score is the share of trees voting for class 1, so the default 0.5
    threshold is a majority vote (ties go to class 1).  Tree ``k`` uses seed
    ``seed + k`` and, when bootstrapping, a resample drawn from ``(seed, k)``.
    """

    family = "rf"

    def __init__(
        self,
        n_trees=100,
        max_depth=None,
        min_leaf=1,
        features_per_split="sqrt",
        bootstrap=True,
        seed=0,
        class_weight=None,
    ):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.features_per_split = features_per_split
        self.bootstrap = bootstrap
        self.seed = seed
        self.class_weight = class_weight

    def _params(self):
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "features_per_split": self.features_per_split,
            "bootstrap": self.bootstrap,
            "seed": self.seed,
            "class_weight": self.class_weight,
        }

    def _fit(self, X, y):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        n = X.shape[0]
        self.trees_ = []
        for k in range(int(self.n_trees)):
            rows = np.arange(n)
            if self.bootstrap:
                rows = np.random.default_rng([int(self.seed), k]).integers(0, n, n)
            est = _tree(self.max_depth, self.min_leaf, self.features_per_split, int(self.seed) + k, self.class_weight)
            est.fit(X[rows], y[rows])
            self.trees_.append(est)

    def _scores(self, X):
        votes = np.zeros(X.shape[0])
        for est in self.trees_:
            votes += _tree_proba(est, X) >= 0.5
        return votes / len(self.trees_)


class GradientBoostedClassifier(_Classifier):
    """Stagewise log-loss boosting of regression trees.

    With ``n_stages=0`` every score is the training base rate.
    """

    family = "gbt"

    def __init__(self, n_stages=100, learning_rate=0.1, max_depth=3, min_leaf=1, subsample=1.0, seed=0):
        self.n_stages = n_stages
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.subsample = subsample
        self.seed = seed

    def _params(self):
        return {
            "n_stages": self.n_stages,
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "subsample": self.subsample,
            "seed": self.seed,
        }

    def _fit(self, X, y):
        self.base_rate_ = float(y.mean())
        self.model_ = None
        if self.n_stages > 0:
            self.model_ = GradientBoostingClassifier(
                loss="log_loss",
                n_estimators=int(self.n_stages),
                learning_rate=self.learning_rate,
                max_depth=self.max_depth,
                min_samples_leaf=self.min_leaf,
                subsample=self.subsample,
                random_state=int(self.seed) % 2**32,
            )
            self.model_.fit(X, y)

    def _scores(self, X):
        if self.model_ is None:
            return np.full(X.shape[0], self.base_rate_)
        return self.model_.predict_proba(X)[:, 1]


FAMILIES = {
    "cart": CARTClassifier,
    "rf": RandomForestClassifier,
    "gbt": GradientBoostedClassifier,
    "zero": ConstantClassifier,
}

DEFAULT_GRIDS = {
    "cart": {"max_depth": [2, 4, 6], "min_leaf": [20]},
    "rf": {"n_trees": [50], "max_depth": [4, 8], "min_leaf": [10]},
    "gbt": {"n_stages": [50], "learning_rate": [0.1], "max_depth": [2, 3], "min_leaf": [10]},
}


@dataclass(frozen=True)
class ClassifierSpec:
    """A classifier family with a hyperparameter grid (lists of values per name)."""

    family: str
    grid: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown classifier family {self.family!r}")
        if any(len(v) == 0 for v in self.grid.values()):
            raise ValueError("every grid axis needs at least one value")

    @classmethod
    def default(cls, family: str, seed: int = 0) -> "ClassifierSpec":
        return cls(family, DEFAULT_GRIDS[family], seed)

    def points(self) -> list:
        """Grid points in deterministic order (last axis varies fastest)."""
        keys = list(self.grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.grid[k] for k in keys))]

    def build(self, params: dict) -> _Classifier:
        kwargs = dict(params)
        if self.family != "zero":
            kwargs.setdefault("seed", self.seed)
        return FAMILIES[self.family](**kwargs)


def fit_classifier(spec: ClassifierSpec, X, y, params: dict | None = None) -> _Classifier:
    if params is None:
        points = spec.points()
        params = points[0] if points else {}
    return spec.build(params).fit(X, y)


# ---------------------------------------------------------------------------
# Metrics


class Metric:
    name = ""

    def __call__(self, y_true, y_pred, scores=None, rows=None) -> float:
        raise NotImplementedError


def _confusion(y_true, y_pred):
    y_true = _check_binary(y_true).astype(bool)
    y_pred = _check_binary(y_pred).astype(bool)
    if y_true.shape != y_pred.shape:
        raise ValueError("labels and predictions are not aligned")
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    return tp, fp, fn, tn


class Accuracy(Metric):
    name = "accuracy"

    def __call__(self, y_true, y_pred, scores=None, rows=None):
        tp, fp, fn, tn = _confusion(y_true, y_pred)
        n = tp + fp + fn + tn
        if n == 0:
            raise UndefinedMetric("accuracy of an empty sample")
        return (tp + tn) / n


class Recall(Metric):
    name = "recall"

    def __call__(self, y_true, y_pred, scores=None, rows=None):
        tp, fp, fn, tn = _confusion(y_true, y_pred)
        if tp + fn == 0:
            raise UndefinedMetric("recall with no positives")
        return tp / (tp + fn)


class F1(Metric):
    name = "f1"

    def __call__(self, y_true, y_pred, scores=None, rows=None):
        tp, fp, fn, tn = _confusion(y_true, y_pred)
        if 2 * tp + fp + fn == 0:
            raise UndefinedMetric("F1 with no positives in labels or predictions")
        return 2 * tp / (2 * tp + fp + fn)


class AUC(Metric):
    """Probability a random positive outscores a random negative (ties count half)."""

    name = "auc"

    def __call__(self, y_true, y_pred=None, scores=None, rows=None):
        y = _check_binary(y_true).astype(bool)
        if scores is None:
            raise UndefinedMetric("AUC needs scores")
        s = np.asarray(scores, dtype=float)
        n_pos, n_neg = int(y.sum()), int((~y).sum())
        if n_pos == 0 or n_neg == 0:
            raise UndefinedMetric("AUC needs both classes")
        order = np.argsort(s, kind="mergesort")
        ranks = np.empty(s.size)
        sorted_s = s[order]
        # average ranks over ties
        starts = np.r_[0, np.flatnonzero(np.diff(sorted_s)) + 1]
        ends = np.r_[starts[1:], s.size]
        avg = (starts + ends + 1) / 2.0
        ranks[order] = np.repeat(avg, ends - starts)
        return (ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class PortfolioArrays:
    """The per-subject inputs retention gain needs: lapse flags and face amounts."""

    lapsed: np.ndarray
    face_amounts: np.ndarray

    @classmethod
    def from_dataset(cls, data) -> "PortfolioArrays":
        return cls(np.asarray(data.lapsed).astype(bool), np.asarray(data.face_amounts, dtype=float))

    def __len__(self):
        return self.lapsed.size

    def subset(self, rows) -> "PortfolioArrays":
        return PortfolioArrays(self.lapsed[rows], self.face_amounts[rows])


class RetentionGain(Metric):
    """Retention gain of the predictions on the evaluated rows.

    ``rows`` are indices into the portfolio the context was built from.
    """

    name = "retention_gain"

    def __init__(self, strategy: StrategyParams, matrices: RetentionMatrices, portfolio):
        self.strategy = strategy
        self.matrices = matrices.truncate(strategy.T) if matrices.horizon > strategy.T else matrices
        self.portfolio = portfolio if isinstance(portfolio, PortfolioArrays) else PortfolioArrays.from_dataset(portfolio)
        if len(self.portfolio) != len(self.matrices):
            raise ValueError("portfolio and matrices are not aligned")

    def __call__(self, y_true, y_pred, scores=None, rows=None):
        if rows is None:
            rows = np.arange(len(self.portfolio))
        rows = np.asarray(rows)
        return retention_gain(self.portfolio.subset(rows), self.matrices.subset(rows), self.strategy, y_pred)


METRICS = {"accuracy": Accuracy, "recall": Recall, "f1": F1, "auc": AUC}


def evaluate(metric: Metric, y_true, y_pred, scores=None, rows=None) -> float:
    return float(metric(y_true, y_pred, scores, rows))


# ---------------------------------------------------------------------------
# Tuning


@dataclass
class TunedModel:
    model: _Classifier | None
    family: str
    params: dict
    fold_scores: list
    mean_score: float
    metric: str
    grid_scores: list = field(default_factory=list)  # (family, params, mean) per candidate
    oof_predictions: np.ndarray | None = None  # chosen candidate's validation-fold labels

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "hyperparameters": self.params,
            "metric": self.metric,
            "fold_scores": list(self.fold_scores),
            "mean_score": self.mean_score,
            "grid": [{"family": f, "hyperparameters": p, "mean_score": m} for f, p, m in self.grid_scores],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cross_validate_tune(
    spec: ClassifierSpec,
    X,
    y,
    metric: Metric,
    k: int = 5,
    seed: int = 0,
    *,
    rows=None,
    include_zero: bool | None = None,
    folds=None,
    refit: bool = True,
) -> TunedModel:
    """Choose the grid point with the best mean validation metric, then refit on all rows.

    Folds come from :func:`lapselab.portfolio.kfold_split` unless given.  When
    tuning on retention gain the do-nothing classifier is evaluated first, so
    the chosen candidate never has a lower CV mean than zero; ties keep the
    earlier candidate.  ``rows`` maps the rows of ``X`` to portfolio indices
    for retention gain.
    """
    X = np.asarray(X, dtype=float)
    y = _check_binary(y)
    rows = np.arange(y.size) if rows is None else np.asarray(rows)
    if include_zero is None:
        include_zero = isinstance(metric, RetentionGain)
    candidates = [(spec.family, spec, p) for p in spec.points()]
    if include_zero:
        candidates.insert(0, ("zero", ClassifierSpec("zero"), {"value": 0}))
    if folds is None:
        folds = kfold_split(y.size, k, seed)
    best = None
    grid_scores = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateLabels)
        for family, cspec, params in candidates:
            fold_scores = []
            oof = np.zeros(y.size, dtype=np.int8)
            for train, val in folds:
                model = cspec.build(params).fit(X[train], y[train])
                oof[val] = model.predict(X[val])
                fold_scores.append(float(metric(y[val], oof[val], model.predict_proba(X[val]), rows[val])))
            mean = float(np.mean(fold_scores))
            grid_scores.append((family, params, mean))
            if best is None or mean > best[3]:
                best = (family, cspec, params, mean, fold_scores, oof)
    family, cspec, params, mean, fold_scores, oof = best
    model = cspec.build(params).fit(X, y) if refit else None
    return TunedModel(
        model=model,
        family=family,
        params=model.get_params() if model is not None else cspec.build(params).get_params(),
        fold_scores=fold_scores,
        mean_score=mean,
        metric=metric.name,
        grid_scores=grid_scores,
        oof_predictions=oof,
    )
