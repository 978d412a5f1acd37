"""Competing-risks survival estimation and retention matrices."""
from .base import CauseRecoding, NotFitted, SchemaMismatch, TooFewSamples
from .boosting import GradientBoostedSurvival, NonFiniteLoss, cox_loss, cox_loss_gradient, fit_gbsm
from .cox import (
    CoxFitError,
    CoxModel,
    NonConvergence,
    SeparationDetected,
    cox_partial_likelihood,
    fit_cox,
    select_cox_covariates,
)
from .nonparametric import (
    Degenerate,
    Empty,
    NoComparablePairs,
    StepFunction,
    cause_specific_cif,
    concordance_index,
    kaplan_meier,
    logrank_statistic,
    nelson_aalen,
)
from .retention import RetentionMatrices, build_retention_matrices, compare_models
from .tree import SurvivalForest, SurvivalTree, fit_rsf, fit_survival_tree


def predict_survival(model, X, times):
    """Survival probabilities from any fitted model family.

    ``times`` is a shared grid (1-d) or an (n, m) matrix of per-subject times.
    """
    if model is None or not hasattr(model, "predict_survival"):
        raise NotFitted("model is not fitted")
    return model.predict_survival(X, times)


__all__ = [
    "CauseRecoding",
    "CoxFitError",
    "CoxModel",
    "Degenerate",
    "Empty",
    "GradientBoostedSurvival",
    "NoComparablePairs",
    "NonConvergence",
    "NonFiniteLoss",
    "NotFitted",
    "RetentionMatrices",
    "SchemaMismatch",
    "SeparationDetected",
    "StepFunction",
    "SurvivalForest",
    "SurvivalTree",
    "TooFewSamples",
    "build_retention_matrices",
    "cause_specific_cif",
    "compare_models",
    "concordance_index",
    "cox_loss",
    "cox_loss_gradient",
    "cox_partial_likelihood",
    "fit_cox",
    "fit_gbsm",
    "fit_rsf",
    "fit_survival_tree",
    "kaplan_meier",
    "logrank_statistic",
    "nelson_aalen",
    "predict_survival",
    "select_cox_covariates",
]
