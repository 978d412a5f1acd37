"""Scenario engine: compare lapse-label and profit-label targeting across strategies.

Pipeline A trains on the lapse flag ``y`` and tunes on accuracy; pipeline B
trains on the profit label ``1(z > 0)`` and tunes on retention gain.  Both are
scored out of sample on the same outer folds.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import time
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from ._parallel import worker_count
from .classify import (
    Accuracy,
    ClassifierSpec,
    DegenerateLabels,
    PortfolioArrays,
    RetentionGain,
    cross_validate_tune,
)
from .portfolio import kfold_split, summary_stats
from .survival.retention import RetentionMatrices
from .valuation import InvalidStrategy, StrategyParams, individual_gains, optimal_retention_gain, profit_targets


class LMSError(ValueError):
    pass


class InvalidScenario(LMSError):
    def __init__(self, name, reason):
        super().__init__(f"scenario {name!r}: {reason}")
        self.name = name


class HorizonMismatch(LMSError):
    pass


class ZeroBaseline(LMSError):
    pass


class ImplicationViolated(LMSError):
    pass


class EmptySubset(LMSError):
    pass


class InvalidAxis(LMSError):
    pass


STRATEGY_FIELDS = ("p", "delta", "gamma", "c", "d", "T")
DEFAULT_FAMILIES = ("cart", "rf", "gbt")


def derive_seed(master: int, *labels) -> int:
    """Stable 32-bit sub-seed for a named job."""
    keys = [int(master) % 2**32] + [zlib.crc32(str(lab).encode()) for lab in labels]
    return int(np.random.SeedSequence(keys).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Scenario tables


@dataclass(frozen=True)
class Scenario:
    name: str
    strategy: StrategyParams

    def to_dict(self) -> dict:
        return {"name": self.name, **self.strategy.to_dict()}


class ScenarioTable:
    """Ordered, uniquely named strategies."""

    def __init__(self, scenarios=()):
        self.scenarios = list(scenarios)
        seen = set()
        for sc in self.scenarios:
            if sc.name in seen:
                raise InvalidScenario(sc.name, "duplicate name")
            seen.add(sc.name)

    def __iter__(self):
        return iter(self.scenarios)

    def __len__(self):
        return len(self.scenarios)

    def __getitem__(self, name) -> Scenario:
        for sc in self.scenarios:
            if sc.name == name:
                return sc
        raise KeyError(name)

    @property
    def names(self):
        return [sc.name for sc in self.scenarios]

    def select(self, names) -> "ScenarioTable":
        return ScenarioTable([self[n] for n in names])

    @classmethod
    def from_records(cls, records) -> "ScenarioTable":
        out = []
        for i, rec in enumerate(records):
            name = str(rec.get("name", f"#{i + 1}"))
            missing = [k for k in STRATEGY_FIELDS if k not in rec]
            if missing:
                raise InvalidScenario(name, f"missing {', '.join(missing)}")
            try:
                out.append(Scenario(name, StrategyParams(**{k: rec[k] for k in STRATEGY_FIELDS})))
            except (InvalidStrategy, TypeError) as exc:
                raise InvalidScenario(name, str(exc)) from None
        return cls(out)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioTable":
        doc = json.loads(text)
        return cls.from_records(doc["scenarios"] if isinstance(doc, dict) else doc)

    @classmethod
    def load(cls, path) -> "ScenarioTable":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def builtin(cls) -> "ScenarioTable":
        """The 64 reference strategies A-1..A-32 and B-1..B-32."""
        text = resources.files("lapselab").joinpath("data/scenarios.json").read_text(encoding="utf-8")
        return cls.from_json(text)

    def to_json(self) -> str:
        return json.dumps({"scenarios": [sc.to_dict() for sc in self.scenarios]}, indent=1)


# ---------------------------------------------------------------------------
# Comparison statistics


def improvement(rg_y: float, rg_ytilde: float) -> float:
    """Percentage change from ``rg_y`` to ``rg_ytilde`` relative to ``|rg_y|``."""
    if rg_y == 0:
        raise ZeroBaseline("improvement is undefined for a zero baseline")
    return (rg_ytilde - rg_y) / abs(rg_y) * 100.0


def target_diff_share(y, y_tilde) -> float:
    """Share of subjects that lapse but are not worth targeting."""
    y = np.asarray(y).astype(bool)
    yt = np.asarray(y_tilde).astype(bool)
    if y.shape != yt.shape:
        raise ValueError("y and y_tilde are not aligned")
    if np.any(yt & ~y):
        raise ImplicationViolated("y_tilde = 1 for a subject with y = 0")
    if y.size == 0:
        return 0.0
    return float(np.sum(y & ~yt)) / y.size


def ones_share(labels) -> float:
    labels = np.asarray(labels)
    return float(labels.mean()) if labels.size else 0.0


def profile_nontargeted(data, y, y_tilde) -> dict:
    """Summary statistics of lapsers not worth targeting, next to the full portfolio's."""
    y = np.asarray(y).astype(bool)
    yt = np.asarray(y_tilde).astype(bool)
    rows = np.flatnonzero(y & ~yt)
    if rows.size == 0:
        raise EmptySubset("no subject has y = 1 and y_tilde = 0")
    return {"subset": summary_stats(data.subset(rows)), "population": summary_stats(data)}


# ---------------------------------------------------------------------------
# Scenario runs


@dataclass
class FamilyResult:
    family: str
    accuracy_y: float
    accuracy_ytilde: float
    rg_y: float
    rg_ytilde: float
    n_targets_y: int
    n_targets_ytilde: int
    fold_rg_y: list
    fold_rg_ytilde: list
    chosen_ytilde: list = field(default_factory=list)

    @property
    def rg_per_target_y(self):
        return _per_target(self.fold_rg_y, self.n_targets_y)

    @property
    def rg_per_target_ytilde(self):
        return _per_target(self.fold_rg_ytilde, self.n_targets_ytilde)

    @property
    def improvement(self):
        try:
            return improvement(self.rg_y, self.rg_ytilde)
        except ZeroBaseline:
            return None

    def flags(self) -> list:
        out = []
        if self.rg_per_target_y is None:
            out.append("rg_per_target_y:no_targets")
        if self.rg_per_target_ytilde is None:
            out.append("rg_per_target_ytilde:no_targets")
        if self.improvement is None:
            out.append("improvement:zero_baseline")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            rg_per_target_y=self.rg_per_target_y,
            rg_per_target_ytilde=self.rg_per_target_ytilde,
            improvement=self.improvement,
            flags=self.flags(),
        )
        return d

    @classmethod
    def from_dict(cls, d) -> "FamilyResult":
        keep = {k: d[k] for k in cls.__dataclass_fields__}
        return cls(**keep)


def _per_target(fold_rg, n_targets):
    # pooled over folds: total out-of-sample gain per target
    if n_targets == 0:
        return None
    return math.fsum(fold_rg) / n_targets


@dataclass
class ScenarioResult:
    name: str
    strategy: StrategyParams
    families: dict
    target_diff_share: float
    ones_share_ytilde: float
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "strategy": self.strategy.to_dict(),
            "target_diff_share": self.target_diff_share,
            "ones_share_ytilde": self.ones_share_ytilde,
            "wall_time": self.wall_time,
            "families": {f: r.to_dict() for f, r in self.families.items()},
        }

    @classmethod
    def from_dict(cls, d) -> "ScenarioResult":
        return cls(
            name=d["name"],
            strategy=StrategyParams.from_dict(d["strategy"]),
            families={f: FamilyResult.from_dict(r) for f, r in d["families"].items()},
            target_diff_share=d["target_diff_share"],
            ones_share_ytilde=d["ones_share_ytilde"],
            wall_time=d.get("wall_time", 0.0),
        )


PROTOCOLS = ("cv", "nested")


@dataclass
class LapseLabelPipeline:
    """Out-of-fold predictions of the accuracy-tuned lapse-label models.

    They do not depend on the strategy, so one instance serves every scenario
    that uses the same data, folds and seed.
    """

    folds: list
    predictions: dict  # family -> out-of-fold predicted labels
    fold_accuracy: dict  # family -> accuracy per outer fold
    protocol: str = "cv"

    @classmethod
    def fit(cls, X, y, folds, families, *, protocol="cv", inner_k=3, seed=0, grids=None) -> "LapseLabelPipeline":
        grids = grids or {}
        preds, accs = {}, {}
        metric = Accuracy()
        for family in families:
            spec = _spec(family, grids, derive_seed(seed, "lapse-label", family))
            preds[family], accs[family], _ = _out_of_fold(spec, X, y, metric, folds, protocol, inner_k, seed)
        return cls(folds=folds, predictions=preds, fold_accuracy=accs, protocol=protocol)


def _spec(family, grids, seed) -> ClassifierSpec:
    if family in grids:
        return ClassifierSpec(family, grids[family], seed)
    return ClassifierSpec.default(family, seed)


def _out_of_fold(spec, X, labels, metric, folds, protocol, inner_k, seed):
    """Out-of-fold predictions, per-fold metric values and chosen candidates.

    ``cv``: every candidate is scored on the shared folds and the best mean
    wins, so the reported folds are those of the winner.  ``nested``: each
    outer fold is tuned by an inner ``inner_k``-fold search on its training
    part and then scored once on the held-out part.
    """
    if protocol == "cv":
        tuned = cross_validate_tune(spec, X, labels, metric, folds=folds, refit=False)
        chosen = [{"family": tuned.family, "hyperparameters": tuned.params}] * len(folds)
        return tuned.oof_predictions, list(tuned.fold_scores), chosen
    if protocol != "nested":
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    pred = np.zeros(labels.size, dtype=np.int8)
    fold_scores, chosen = [], []
    for j, (train, val) in enumerate(folds):
        tuned = cross_validate_tune(
            spec, X[train], labels[train], metric, inner_k, derive_seed(seed, "inner", j), rows=train
        )
        pred[val] = tuned.model.predict(X[val])
        fold_scores.append(float(metric(labels[val], pred[val], None, val)))
        chosen.append({"family": tuned.family, "hyperparameters": tuned.params})
    return pred, fold_scores, chosen


def _features(data):
    return np.asarray(data.features, dtype=float)


def outer_folds(n: int, k: int, seed: int):
    return kfold_split(n, k, derive_seed(seed, "outer-folds"))


def run_scenario(
    data,
    matrices: RetentionMatrices,
    s: StrategyParams,
    families=DEFAULT_FAMILIES,
    k: int = 5,
    seed: int = 0,
    *,
    name: str = "scenario",
    protocol: str = "cv",
    inner_k: int = 3,
    grids: dict | None = None,
    lapse_pipeline: LapseLabelPipeline | None = None,
) -> ScenarioResult:
    """Run both pipelines for one strategy on shared ``k``-fold assignments.

    Reported accuracy and retention gain are means over the ``k`` validation
    folds of the selected candidate (see :func:`_out_of_fold` for the two
    protocols).  Pipeline B's candidates start with the do-nothing
    classifier.
    """
    if matrices.horizon < s.T:
        raise HorizonMismatch(f"matrices cover {matrices.horizon} years, strategy {name!r} needs {s.T}")
    start = time.perf_counter()
    X = _features(data)
    y = np.asarray(data.lapsed).astype(np.int8)
    portfolio = PortfolioArrays.from_dataset(data)
    z = individual_gains(portfolio, matrices, s)
    y_tilde = profit_targets(z)
    if lapse_pipeline is None:
        lapse_pipeline = LapseLabelPipeline.fit(
            X, y, outer_folds(y.size, k, seed), families, protocol=protocol, inner_k=inner_k, seed=seed, grids=grids
        )
    elif lapse_pipeline.protocol != protocol:
        raise ValueError("lapse-label pipeline was fitted under a different protocol")
    folds = lapse_pipeline.folds
    rg_metric = RetentionGain(s, matrices, portfolio)
    acc = Accuracy()
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateLabels)
        for family in families:
            spec = _spec(family, grids or {}, derive_seed(seed, "profit-label", name, family))
            pred_a = lapse_pipeline.predictions[family]
            fold_rg_a = [rg_metric(y[val], pred_a[val], rows=val) for _, val in folds]
            pred_b, fold_rg_b, chosen = _out_of_fold(spec, X, y_tilde, rg_metric, folds, protocol, inner_k, seed)
            fold_acc_b = [acc(y_tilde[val], pred_b[val]) for _, val in folds]
            out[family] = FamilyResult(
                family=family,
                accuracy_y=float(np.mean(lapse_pipeline.fold_accuracy[family])),
                accuracy_ytilde=float(np.mean(fold_acc_b)),
                rg_y=float(np.mean(fold_rg_a)),
                rg_ytilde=float(np.mean(fold_rg_b)),
                n_targets_y=int(pred_a.sum()),
                n_targets_ytilde=int(pred_b.sum()),
                fold_rg_y=fold_rg_a,
                fold_rg_ytilde=fold_rg_b,
                chosen_ytilde=chosen,
            )
    return ScenarioResult(
        name=name,
        strategy=s,
        families=out,
        target_diff_share=target_diff_share(y, y_tilde),
        ones_share_ytilde=ones_share(y_tilde),
        wall_time=time.perf_counter() - start,
    )


def _matrices_for(matrices_by_T, T):
    if isinstance(matrices_by_T, RetentionMatrices):
        m = matrices_by_T
    else:
        if T not in matrices_by_T:
            raise HorizonMismatch(f"no retention matrices for horizon {T}")
        m = matrices_by_T[T]
    if m.horizon < T:
        raise HorizonMismatch(f"matrices cover {m.horizon} years, need {T}")
    return m


def _fingerprint(data, scenario: Scenario, families, k, seed, protocol, inner_k, grids) -> str:
    payload = json.dumps(
        {
            "protocol": protocol,
            "scenario": scenario.to_dict(),
            "families": list(families),
            "k": k,
            "inner_k": inner_k,
            "seed": seed,
            "grids": grids,
            "ids": hashlib.sha256("\n".join(data.subject_ids).encode()).hexdigest(),
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _checkpoint_path(directory, name) -> Path:
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
    return Path(directory) / f"{safe}.json"


def run_grid(
    data,
    matrices_by_T,
    table: ScenarioTable,
    families=DEFAULT_FAMILIES,
    k: int = 5,
    seed: int = 0,
    *,
    protocol: str = "cv",
    inner_k: int = 3,
    grids: dict | None = None,
    checkpoint_dir=None,
    n_jobs: int | None = None,
) -> list:
    """Run every scenario of ``table``; results come back in table order.

    ``matrices_by_T`` is one :class:`RetentionMatrices` covering the longest
    horizon, or a mapping from horizon to matrices.  With ``checkpoint_dir``
    each finished scenario is written to ``<name>.json`` and reused on a
    rerun with the same configuration.
    """
    scenarios = list(table)
    if not scenarios:
        return []
    for sc in scenarios:
        _matrices_for(matrices_by_T, sc.strategy.T)
    results = [None] * len(scenarios)
    prints = [_fingerprint(data, sc, families, k, seed, protocol, inner_k, grids) for sc in scenarios]
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        for i, sc in enumerate(scenarios):
            path = _checkpoint_path(checkpoint_dir, sc.name)
            if path.exists():
                try:
                    doc = json.loads(path.read_text(encoding="utf-8"))
                except json.JSONDecodeError:
                    continue
                if doc.get("fingerprint") == prints[i]:
                    results[i] = ScenarioResult.from_dict(doc["result"])
    todo = [i for i, r in enumerate(results) if r is None]
    if not todo:
        return results
    X = _features(data)
    y = np.asarray(data.lapsed).astype(np.int8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateLabels)
        lapse_pipeline = LapseLabelPipeline.fit(
            X, y, outer_folds(y.size, k, seed), families, protocol=protocol, inner_k=inner_k, seed=seed, grids=grids
        )

    def job(i):
        sc = scenarios[i]
        res = run_scenario(
            data,
            _matrices_for(matrices_by_T, sc.strategy.T),
            sc.strategy,
            families,
            k,
            seed,
            name=sc.name,
            protocol=protocol,
            inner_k=inner_k,
            grids=grids,
            lapse_pipeline=lapse_pipeline,
        )
        if checkpoint_dir is not None:
            doc = {"fingerprint": prints[i], "result": res.to_dict()}
            _checkpoint_path(checkpoint_dir, sc.name).write_text(json.dumps(doc, indent=1), encoding="utf-8")
        return res

    workers = min(worker_count(n_jobs), len(todo))
    if workers > 1:
        done = Parallel(n_jobs=workers)(delayed(job)(i) for i in todo)
    else:
        done = [job(i) for i in todo]
    for i, res in zip(todo, done):
        results[i] = res
    return results


RESULT_COLUMNS = (
    "scenario",
    "family",
    "p",
    "delta",
    "gamma",
    "c",
    "d",
    "T",
    "target_diff_share",
    "ones_share_ytilde",
    "accuracy_y",
    "accuracy_ytilde",
    "rg_y",
    "rg_ytilde",
    "rg_per_target_y",
    "rg_per_target_ytilde",
    "improvement",
    "flags",
)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv(results) -> str:
    """One row per (scenario, family).  Undefined cells are empty and named in ``flags``.

    Wall time is left out so reruns produce identical files; it is kept in
    the JSON detail.
    """
    buf = io.StringIO()
    buf.write(",".join(RESULT_COLUMNS) + "\n")
    for res in results:
        for family, fr in res.families.items():
            s = res.strategy
            row = [
                res.name,
                family,
                s.p,
                s.delta,
                s.gamma,
                s.c,
                s.d,
                s.T,
                res.target_diff_share,
                res.ones_share_ytilde,
                fr.accuracy_y,
                fr.accuracy_ytilde,
                fr.rg_y,
                fr.rg_ytilde,
                fr.rg_per_target_y,
                fr.rg_per_target_ytilde,
                fr.improvement,
                ";".join(fr.flags()),
            ]
            buf.write(",".join(_cell(v) for v in row) + "\n")
    return buf.getvalue()


def results_json(results) -> str:
    return json.dumps([r.to_dict() for r in results], indent=1)


def improvement_correlation(results, family: str) -> float:
    """Pearson correlation between improvement and target-diff share over scenarios with a defined improvement."""
    pairs = [
        (res.families[family].improvement, res.target_diff_share)
        for res in results
        if family in res.families and res.families[family].improvement is not None
    ]
    if len(pairs) < 2:
        raise ValueError("need at least two scenarios with a defined improvement")
    a = np.array(pairs, dtype=float)
    if np.std(a[:, 0]) == 0 or np.std(a[:, 1]) == 0:
        raise ValueError("correlation undefined for a constant column")
    return float(np.corrcoef(a[:, 0], a[:, 1])[0, 1])


# ---------------------------------------------------------------------------
# Sensitivity surfaces


@dataclass
class SensitivityGrid:
    axis1: tuple  # (parameter, values)
    axis2: tuple
    rg: np.ndarray  # shape (len(values1), len(values2))
    base: StrategyParams
    mode: str = "oracle"

    def __post_init__(self):
        if self.rg.shape != (len(self.axis1[1]), len(self.axis2[1])):
            raise ValueError("surface shape does not match the axes")

    def rows(self):
        for i, a in enumerate(self.axis1[1]):
            for j, b in enumerate(self.axis2[1]):
                yield a, b, float(self.rg[i, j])

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        buf.write(f"{self.axis1[0]},{self.axis2[0]},rg\n")
        for a, b, v in self.rows():
            buf.write(f"{_cell(a)},{_cell(b)},{v!r}\n")
        return buf.getvalue()


def _axis(axis, matrices):
    try:
        param, values = axis
    except (TypeError, ValueError):
        raise InvalidAxis("an axis is a (parameter, values) pair") from None
    if param not in STRATEGY_FIELDS:
        raise InvalidAxis(f"unknown parameter {param!r}; expected one of {STRATEGY_FIELDS}")
    values = list(values)
    if not values:
        raise InvalidAxis(f"axis {param!r} has no values")
    if param == "T":
        values = [int(v) for v in values]
        if max(values) > matrices.horizon:
            raise InvalidAxis(f"horizon {max(values)} exceeds the matrices' {matrices.horizon}")
    else:
        values = [float(v) for v in values]
    return param, values


def sensitivity_surface(
    data,
    matrices: RetentionMatrices,
    base: StrategyParams,
    axis1,
    axis2,
    *,
    targeting=None,
    classifier: ClassifierSpec | None = None,
    k: int = 5,
    seed: int = 0,
) -> SensitivityGrid:
    """Retention gain over a two-parameter grid around ``base``.

    Default (oracle) cells hold the best attainable gain, the sum of the
    positive individual gains (each already net of the contact cost).  With
    ``targeting`` the cells hold the gain of that fixed target vector.  With
    ``classifier`` each cell trains that classifier on the profit label
    with ``k``-fold cross-fitting and reports the out-of-fold gain.
    """
    p1, v1 = _axis(axis1, matrices)
    p2, v2 = _axis(axis2, matrices)
    if p1 == p2:
        raise InvalidAxis("the two axes must vary different parameters")
    portfolio = PortfolioArrays.from_dataset(data)
    if targeting is not None:
        targeting = np.asarray(targeting).astype(bool)
        if targeting.shape != (len(portfolio),):
            raise InvalidAxis("targeting vector is not aligned with the portfolio")
    X = _features(data) if classifier is not None else None
    folds = kfold_split(len(portfolio), k, derive_seed(seed, "surface-folds")) if classifier is not None else None
    rg = np.empty((len(v1), len(v2)))
    base_d = base.to_dict()
    for i, a in enumerate(v1):
        for j, b in enumerate(v2):
            try:
                s = StrategyParams(**{**base_d, p1: a, p2: b})
            except InvalidStrategy as exc:
                raise InvalidAxis(f"({p1}={a}, {p2}={b}): {exc}") from None
            z = individual_gains(portfolio, matrices, s)
            if classifier is not None:
                rg[i, j] = _cross_fitted_gain(classifier, X, z, folds)
            elif targeting is not None:
                rg[i, j] = math.fsum(z[targeting])
            else:
                rg[i, j] = optimal_retention_gain(z)
    mode = "classifier" if classifier is not None else ("fixed" if targeting is not None else "oracle")
    return SensitivityGrid((p1, v1), (p2, v2), rg, base, mode)


def _cross_fitted_gain(spec: ClassifierSpec, X, z, folds) -> float:
    labels = profit_targets(z)
    pred = np.zeros(z.size, dtype=bool)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateLabels)
        for train, val in folds:
            model = spec.build(spec.points()[0]).fit(X[train], labels[train])
            pred[val] = model.predict(X[val]).astype(bool)
    return math.fsum(z[pred])
