"""Step 1 of the pipeline: fit r^acceptant / r^lapser models and build retention matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..portfolio import FEATURE_GROUPS, FEATURE_NAMES, EventCode, PortfolioDataset, train_test_split
from .base import CauseRecoding, NotFitted, SchemaMismatch
from .boosting import fit_gbsm
from .cox import fit_cox, select_cox_covariates
from .nonparametric import concordance_index
from .tree import fit_rsf

MODEL_FAMILIES = ("cox", "rsf", "gbsm")
# Cheaper families first: ties in held-out concordance go to the earlier one.
FAMILY_COST_ORDER = {"cox": 0, "rsf": 1, "gbsm": 2}

ACCEPTANT = "acceptant"
LAPSER = "lapser"

RECODINGS = {
    LAPSER: CauseRecoding.combined(),
    ACCEPTANT: CauseRecoding.cause_specific(EventCode.DEATH),
}


class ModelFitFailed(RuntimeError):
    def __init__(self, family, target, cause):
        super().__init__(f"{family} model for r^{target} failed: {type(cause).__name__}: {cause}")
        self.family = family
        self.target = target
        self.cause = cause


@dataclass(frozen=True)
class RetentionMatrices:
    """Per-subject probabilities of still being active ``t = 0..horizon`` years ahead."""

    r_acceptant: np.ndarray
    r_lapser: np.ndarray
    horizon: int

    def __post_init__(self):
        shape = (self.r_acceptant.shape[0], self.horizon + 1)
        if self.r_acceptant.shape != shape or self.r_lapser.shape != shape:
            raise ValueError(f"matrices must have shape (n, horizon+1) = {shape}")

    def __len__(self):
        return self.r_acceptant.shape[0]

    def subset(self, indices) -> "RetentionMatrices":
        idx = np.asarray(indices)
        return RetentionMatrices(self.r_acceptant[idx], self.r_lapser[idx], self.horizon)

    def truncate(self, T: int) -> "RetentionMatrices":
        if T > self.horizon:
            raise ValueError(f"horizon {self.horizon} < requested {T}")
        return RetentionMatrices(self.r_acceptant[:, : T + 1], self.r_lapser[:, : T + 1], int(T))


def conditional_retention(model, X, seniority, T: int) -> np.ndarray:
    """``S(s + t) / S(s)`` for t = 0..T, where s is each subject's seniority.

    Subjects whose fitted survival at ``s`` is zero carry their t=0 value
    (1) forward, matching the flat extrapolation used past the last
    training event time.
    """
    if model is None or not hasattr(model, "predict_survival"):
        raise NotFitted("survival model is not fitted")
    seniority = np.asarray(seniority, dtype=float)
    times = seniority[:, None] + np.arange(T + 1, dtype=float)[None, :]
    S = model.predict_survival(X, times)
    denom = S[:, :1]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(denom > 0, S / np.where(denom > 0, denom, 1.0), 1.0)
    r = np.clip(r, 0.0, 1.0)
    r[:, 0] = 1.0
    # guard against round-off making a row increase
    return np.minimum.accumulate(r, axis=1)


def build_retention_matrices(model_acceptant, model_lapser, data: PortfolioDataset, T: int) -> RetentionMatrices:
    if T < 0:
        raise ValueError("horizon must be >= 0")
    for m in (model_acceptant, model_lapser):
        if m is None:
            raise NotFitted("both models must be fitted")
        if tuple(m.feature_names) != FEATURE_NAMES:
            raise SchemaMismatch(f"model features {tuple(m.feature_names)} != portfolio features {FEATURE_NAMES}")
    X = data.features
    s = data.durations
    return RetentionMatrices(
        conditional_retention(model_acceptant, X, s, T),
        conditional_retention(model_lapser, X, s, T),
        int(T),
    )


DEFAULT_OPTIONS = {
    "cox": {"select": "aic"},
    "rsf": {"n_trees": 50, "min_leaf": 15, "features_per_split": "sqrt"},
    "gbsm": {"n_stages": 100, "learning_rate": 0.1, "max_depth": 3, "min_leaf": 10, "subsample": 1.0},
}


def training_population(data: PortfolioDataset, target: str, lapser_population: str = "all") -> np.ndarray:
    """Row indices used to fit the model for ``target``.

    By default both models train on every subject.  ``lapser_population="lapsers"``
    restricts the r^lapser model to subjects observed to lapse.
    """
    if target == LAPSER and lapser_population == "lapsers":
        return np.flatnonzero(data.events == EventCode.LAPSED)
    if lapser_population not in ("all", "lapsers"):
        raise ValueError("lapser_population must be 'all' or 'lapsers'")
    return np.arange(len(data))


def fit_model(family: str, X, durations, codes, recoding: CauseRecoding, options: dict | None = None, seed: int = 0):
    opts = dict(DEFAULT_OPTIONS[family])
    opts.update(options or {})
    if family == "cox":
        select = opts.pop("select", None)
        if select == "aic":
            model, _ = select_cox_covariates(
                X, durations, codes, feature_names=FEATURE_NAMES, groups=FEATURE_GROUPS, recoding=recoding, **opts
            )
            return model
        return fit_cox(X, durations, codes, recoding=recoding, feature_names=FEATURE_NAMES, **opts)
    if family == "rsf":
        return fit_rsf(X, durations, codes, recoding=recoding, feature_names=FEATURE_NAMES, seed=seed, **opts)
    if family == "gbsm":
        return fit_gbsm(X, durations, codes, recoding=recoding, feature_names=FEATURE_NAMES, seed=seed, **opts)
    raise ValueError(f"unknown survival family {family!r}")


@dataclass
class ModelComparison:
    cindex: dict  # (family, target) -> held-out concordance
    models: dict  # (family, target) -> fitted model (refit on all data when requested)
    best: dict  # target -> family

    def rows(self):
        for (family, target), c in sorted(self.cindex.items(), key=lambda kv: (FAMILY_COST_ORDER[kv[0][0]], kv[0][1])):
            yield {"model": family, "target": target, "cindex": c, "selected": self.best[target] == family}


def held_out_cindex(model, data: PortfolioDataset, recoding: CauseRecoding) -> float:
    events = recoding.apply(data.events)
    return concordance_index(data.durations, events, model.risk_score(data.features))


def compare_models(
    data: PortfolioDataset,
    *,
    families=MODEL_FAMILIES,
    options: dict | None = None,
    test_fraction: float = 0.2,
    seed: int = 0,
    lapser_population: str = "all",
    refit: bool = True,
) -> ModelComparison:
    """Held-out concordance for every family and both targets; pick the best per target.

    Seeds for each (family, target) fit derive from ``seed`` alone.
    """
    options = options or {}
    train_idx, test_idx = train_test_split(data, test_fraction, seed)
    train, test = data.subset(train_idx), data.subset(test_idx)
    cindex, models = {}, {}
    for family in families:
        for ti, target in enumerate((LAPSER, ACCEPTANT)):
            recoding = RECODINGS[target]
            fit_seed = int(np.random.SeedSequence([seed, FAMILY_COST_ORDER[family], ti]).generate_state(1)[0])
            rows = training_population(train, target, lapser_population)
            sub = train.subset(rows)
            try:
                model = fit_model(family, sub.features, sub.durations, sub.events, recoding, options.get(family), fit_seed)
                cindex[(family, target)] = held_out_cindex(model, test, recoding)
                if refit:
                    full = data.subset(training_population(data, target, lapser_population))
                    model = fit_model(
                        family, full.features, full.durations, full.events, recoding, options.get(family), fit_seed
                    )
            except (ArithmeticError, ValueError, RuntimeError) as exc:
                raise ModelFitFailed(family, target, exc) from exc
            models[(family, target)] = model
    best = {}
    for target in (LAPSER, ACCEPTANT):
        best[target] = max(families, key=lambda f: (cindex[(f, target)], -FAMILY_COST_ORDER[f]))
    return ModelComparison(cindex=cindex, models=models, best=best)
