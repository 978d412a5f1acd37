"""Versioned JSON documents for fitted survival models."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .base import CauseRecoding
from .boosting import GradientBoostedSurvival, RegressionTree
from .cox import CoxModel
from .nonparametric import StepFunction
from .tree import SurvivalForest, SurvivalTree

FORMAT = "lapselab.survival-model"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def _recoding(d):
    return None if d is None else CauseRecoding.from_dict(d)


def _tree_to_dict(t: SurvivalTree) -> dict:
    return {
        "feature": t.feature.tolist(),
        "threshold": [None if np.isnan(v) else v for v in t.threshold.tolist()],
        "left": t.left.tolist(),
        "right": t.right.tolist(),
        "leaf_of_node": t.leaf_of_node.tolist(),
        "leaf_survival": [f.to_dict() for f in t.leaf_survival],
        "leaf_cumhaz": [f.to_dict() for f in t.leaf_cumhaz],
        "leaf_sizes": t.leaf_sizes.tolist(),
    }


def _tree_from_dict(d: dict, names, unique_times, recoding) -> SurvivalTree:
    return SurvivalTree(
        feature=np.asarray(d["feature"], dtype=np.int64),
        threshold=np.array([np.nan if v is None else v for v in d["threshold"]], dtype=float),
        left=np.asarray(d["left"], dtype=np.int64),
        right=np.asarray(d["right"], dtype=np.int64),
        leaf_of_node=np.asarray(d["leaf_of_node"], dtype=np.int64),
        leaf_survival=[StepFunction.from_dict(f) for f in d["leaf_survival"]],
        leaf_cumhaz=[StepFunction.from_dict(f) for f in d["leaf_cumhaz"]],
        leaf_sizes=np.asarray(d["leaf_sizes"], dtype=np.int64),
        feature_names=tuple(names),
        unique_times=np.asarray(unique_times, dtype=float),
        recoding=recoding,
    )


def model_to_dict(model) -> dict:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "feature_names": list(model.feature_names),
        "recoding": None if model.recoding is None else model.recoding.to_dict(),
    }
    if isinstance(model, CoxModel):
        doc.update(
            beta=model.beta.tolist(),
            center=model.center.tolist(),
            baseline_cumhaz=model.baseline_cumhaz.to_dict(),
            log_likelihood=model.log_likelihood,
            n_iter=model.n_iter,
            selected=list(model.selected),
        )
    elif isinstance(model, SurvivalTree):
        doc.update(unique_times=model.unique_times.tolist(), tree=_tree_to_dict(model))
    elif isinstance(model, SurvivalForest):
        doc.update(
            unique_times=model.unique_times.tolist(),
            tree_seeds=[str(s) for s in model.tree_seeds],
            features_per_split=model.features_per_split,
            bootstrap=model.bootstrap,
            params=model.params,
            trees=[_tree_to_dict(t) for t in model.trees],
        )
    elif isinstance(model, GradientBoostedSurvival):
        doc.update(
            base_score=model.base_score,
            stages=[s.to_dict() for s in model.stages],
            baseline_cumhaz=model.baseline_cumhaz.to_dict(),
            train_loss=list(model.train_loss),
            params=model.params,
        )
    else:
        raise ModelFormatError(f"cannot serialize {type(model).__name__}")
    return doc


def model_from_dict(doc: dict):
    if doc.get("format") != FORMAT:
        raise ModelFormatError("not a lapselab survival model document")
    if doc.get("version") != VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r}")
    names = tuple(doc["feature_names"])
    rec = _recoding(doc.get("recoding"))
    kind = doc["kind"]
    if kind == "cox":
        return CoxModel(
            beta=np.asarray(doc["beta"], dtype=float),
            center=np.asarray(doc["center"], dtype=float),
            baseline_cumhaz=StepFunction.from_dict(doc["baseline_cumhaz"]),
            feature_names=names,
            log_likelihood=float(doc["log_likelihood"]),
            n_iter=int(doc["n_iter"]),
            selected=tuple(doc["selected"]),
            recoding=rec,
        )
    if kind == "tree":
        return _tree_from_dict(doc["tree"], names, doc["unique_times"], rec)
    if kind == "forest":
        return SurvivalForest(
            trees=[_tree_from_dict(t, names, doc["unique_times"], rec) for t in doc["trees"]],
            tree_seeds=[int(s) for s in doc["tree_seeds"]],
            features_per_split=doc["features_per_split"],
            bootstrap=bool(doc["bootstrap"]),
            feature_names=names,
            unique_times=np.asarray(doc["unique_times"], dtype=float),
            recoding=rec,
            params=doc.get("params", {}),
        )
    if kind == "gbsm":
        return GradientBoostedSurvival(
            base_score=float(doc["base_score"]),
            stages=[RegressionTree.from_dict(s) for s in doc["stages"]],
            baseline_cumhaz=StepFunction.from_dict(doc["baseline_cumhaz"]),
            feature_names=names,
            train_loss=list(doc.get("train_loss", [])),
            recoding=rec,
            params=doc.get("params", {}),
        )
    raise ModelFormatError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
    return model_from_dict(doc)
