"""Portfolio data model: policy records, CSV I/O, synthetic portfolios and resampling."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields
from enum import Enum, IntEnum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize

SCHEMA_VERSION = "1"

CSV_COLUMNS = (
    "subject_id",
    "age_at_subscription",
    "n_contracts",
    "gender",
    "product",
    "start_year",
    "seniority",
    "face_amount",
    "event",
)

# One-hot encoding with reference levels M (gender) and P1 (product).
FEATURE_NAMES = (
    "age_at_subscription",
    "n_contracts",
    "gender_F",
    "gender_U",
    "product_P2",
    "product_P3",
    "start_year",
    "face_amount",
)

# Encoded columns grouped by source covariate, used for best-subset selection.
FEATURE_GROUPS = {
    "age_at_subscription": ("age_at_subscription",),
    "n_contracts": ("n_contracts",),
    "gender": ("gender_F", "gender_U"),
    "product": ("product_P2", "product_P3"),
    "start_year": ("start_year",),
    "face_amount": ("face_amount",),
}


class PortfolioError(ValueError):
    """Base class for portfolio validation failures."""


class SchemaError(PortfolioError):
    pass


class MissingColumn(SchemaError):
    def __init__(self, column: str):
        super().__init__(f"missing column {column!r}")
        self.column = column


class BadValue(PortfolioError):
    def __init__(self, row: int, column: str, reason: str):
        super().__init__(f"row {row}, column {column!r}: {reason}")
        self.row = row
        self.column = column


class DuplicateId(PortfolioError):
    def __init__(self, row: int, subject_id: str):
        super().__init__(f"row {row}: duplicate subject_id {subject_id!r}")
        self.row = row
        self.subject_id = subject_id


class EmptyDataset(PortfolioError):
    pass


class InvalidConfig(PortfolioError):
    pass


class BadK(PortfolioError):
    pass


class EventCode(IntEnum):
    ACTIVE = 0
    LAPSED = 1
    DEATH = 2


class Gender(str, Enum):
    F = "F"
    M = "M"
    U = "U"  # unspecified


class Product(str, Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"


@dataclass(frozen=True)
class PolicyRecord:
    """One subject, i.e. a (policy, policyholder) pair."""

    subject_id: str
    age_at_subscription: float
    n_contracts: int
    gender: Gender
    product: Product
    start_year: int
    seniority: float
    face_amount: float
    event: EventCode

    def __post_init__(self):
        for name, reason in self._violations():
            raise ValueError(f"{name}: {reason}")

    def _violations(self):
        if not self.subject_id:
            yield "subject_id", "empty identifier"
        if not (math.isfinite(self.age_at_subscription) and self.age_at_subscription >= 0):
            yield "age_at_subscription", "must be a finite number >= 0"
        if self.n_contracts < 1:
            yield "n_contracts", "must be >= 1"
        if not (math.isfinite(self.seniority) and self.seniority > 0):
            yield "seniority", "must be a finite number > 0"
        if not (math.isfinite(self.face_amount) and self.face_amount >= 0):
            yield "face_amount", "must be a finite number >= 0"

    @property
    def lapsed(self) -> bool:
        return self.event == EventCode.LAPSED


@dataclass(frozen=True)
class PortfolioDataset:
    """Immutable ordered collection of policy records.

    Column arrays (``durations``, ``events``, ...) are computed lazily and
    cached; they must be treated as read-only.
    """

    records: tuple[PolicyRecord, ...]
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise EmptyDataset("a portfolio needs at least one record")
        seen = set()
        for row, rec in enumerate(self.records, start=1):
            if rec.subject_id in seen:
                raise DuplicateId(row, rec.subject_id)
            seen.add(rec.subject_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, indices: Iterable[int]) -> "PortfolioDataset":
        recs = self.records
        return PortfolioDataset(tuple(recs[int(i)] for i in indices), self.schema_version)

    @cached_property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    @cached_property
    def durations(self) -> np.ndarray:
        return np.array([r.seniority for r in self.records], dtype=float)

    @cached_property
    def events(self) -> np.ndarray:
        return np.array([int(r.event) for r in self.records], dtype=np.int64)

    @cached_property
    def face_amounts(self) -> np.ndarray:
        return np.array([r.face_amount for r in self.records], dtype=float)

    @cached_property
    def lapsed(self) -> np.ndarray:
        """Lapse label y (1 when the policy was observed to lapse)."""
        return (self.events == EventCode.LAPSED).astype(np.int64)

    @cached_property
    def features(self) -> np.ndarray:
        """Encoded covariate matrix with columns :data:`FEATURE_NAMES`."""
        return feature_matrix(self.records)


def feature_matrix(records: Sequence[PolicyRecord]) -> np.ndarray:
    X = np.empty((len(records), len(FEATURE_NAMES)), dtype=float)
    for i, r in enumerate(records):
        X[i] = (
            r.age_at_subscription,
            r.n_contracts,
            r.gender is Gender.F,
            r.gender is Gender.U,
            r.product is Product.P2,
            r.product is Product.P3,
            r.start_year,
            r.face_amount,
        )
    return X


# ---------------------------------------------------------------------------
# CSV


def _parse_row(row: dict, rownum: int) -> PolicyRecord:
    def conv(column, fn, reason):
        raw = row[column]
        try:
            return fn(raw.strip())
        except (ValueError, TypeError):
            raise BadValue(rownum, column, f"{reason}, got {raw!r}") from None

    values = dict(
        subject_id=conv("subject_id", lambda s: s if s else _fail(), "non-empty identifier expected"),
        age_at_subscription=conv("age_at_subscription", float, "number expected"),
        n_contracts=conv("n_contracts", int, "integer expected"),
        gender=conv("gender", Gender, "one of F, M, U expected"),
        product=conv("product", Product, "one of P1, P2, P3 expected"),
        start_year=conv("start_year", int, "integer year expected"),
        seniority=conv("seniority", float, "number expected"),
        face_amount=conv("face_amount", float, "number expected"),
        event=conv("event", lambda s: EventCode(int(s)), "one of 0, 1, 2 expected"),
    )
    rec = object.__new__(PolicyRecord)
    for k, v in values.items():
        object.__setattr__(rec, k, v)
    for column, reason in rec._violations():
        raise BadValue(rownum, column, reason)
    return rec


def _fail():
    raise ValueError


def read_csv(stream) -> PortfolioDataset:
    reader = csv.DictReader(stream)
    header = reader.fieldnames or []
    for col in CSV_COLUMNS:
        if col not in header:
            raise MissingColumn(col)
    if tuple(header) != CSV_COLUMNS:
        raise SchemaError(f"header must be exactly {','.join(CSV_COLUMNS)}; got {','.join(header)}")
    records = []
    seen = set()
    for rownum, row in enumerate(reader, start=1):
        if None in row or any(v is None for v in row.values()):
            raise BadValue(rownum, "*", "wrong number of fields")
        rec = _parse_row(row, rownum)
        if rec.subject_id in seen:
            raise DuplicateId(rownum, rec.subject_id)
        seen.add(rec.subject_id)
        records.append(rec)
    if not records:
        raise EmptyDataset("file has a header but no rows")
    return PortfolioDataset(tuple(records))


def load_csv(path) -> PortfolioDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        return read_csv(fh)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def to_csv_string(data: PortfolioDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in data.records:
        w.writerow(
            (
                r.subject_id,
                _fmt_float(r.age_at_subscription),
                r.n_contracts,
                r.gender.value,
                r.product.value,
                r.start_year,
                _fmt_float(r.seniority),
                _fmt_float(r.face_amount),
                int(r.event),
            )
        )
    return buf.getvalue()


def write_csv(data: PortfolioDataset, path) -> None:
    Path(path).write_text(to_csv_string(data), encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic portfolios

# Linear-predictor inputs of the synthetic hazards; standardized so that
# coefficients are comparable across covariates.
HAZARD_COVARIATES = ("age", "n_contracts", "gender_F", "gender_U", "product_P2", "product_P3", "log_face")


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic portfolio generator.

    Cause-specific hazards are exponential proportional hazards,
    ``rate_j * exp(x @ coef_j)``, over the standardized covariates in
    :data:`HAZARD_COVARIATES`.  The two baseline rates and the length of the
    entry window are calibrated so that the expected state mix and mean
    seniority hit ``state_shares`` and ``mean_seniority``.
    """

    n_subjects: int = 10_000
    seed: int = 0
    gender_shares: dict = field(default_factory=lambda: {"M": 0.574, "F": 0.41, "U": 0.016})
    product_shares: dict = field(default_factory=lambda: {"P1": 0.72, "P2": 0.25, "P3": 0.03})
    state_shares: dict = field(default_factory=lambda: {"active": 0.61, "lapsed": 0.22, "death": 0.17})
    mean_seniority: float = 13.4
    lapse_coefficients: dict = field(
        default_factory=lambda: {"age": -0.3, "n_contracts": -0.3, "product_P2": 0.4, "log_face": 0.3}
    )
    death_coefficients: dict = field(default_factory=lambda: {"age": 1.0, "gender_F": -0.3})
    age_mean: float = 45.0
    age_sd: float = 12.0
    face_median: float = 15_000.0
    face_log_sd: float = 1.3
    extra_contract_rate: float = 0.4
    observation_year: int = 2019

    def __post_init__(self):
        if int(self.n_subjects) < 1:
            raise InvalidConfig("n_subjects must be >= 1")
        for name, keys in (
            ("gender_shares", {"F", "M", "U"}),
            ("product_shares", {"P1", "P2", "P3"}),
            ("state_shares", {"active", "lapsed", "death"}),
        ):
            shares = getattr(self, name)
            if set(shares) != keys:
                raise InvalidConfig(f"{name} must have keys {sorted(keys)}")
            if any(not (0.0 <= v <= 1.0) for v in shares.values()):
                raise InvalidConfig(f"{name}: shares must lie in [0, 1]")
            if abs(sum(shares.values()) - 1.0) > 1e-9:
                raise InvalidConfig(f"{name}: shares must sum to 1")
        for name in ("lapse_coefficients", "death_coefficients"):
            unknown = set(getattr(self, name)) - set(HAZARD_COVARIATES)
            if unknown:
                raise InvalidConfig(f"{name}: unknown covariates {sorted(unknown)}")
        if self.state_shares["active"] <= 0 or self.state_shares["active"] >= 1:
            raise InvalidConfig("state_shares['active'] must lie strictly inside (0, 1)")
        if self.mean_seniority <= 0:
            raise InvalidConfig("mean_seniority must be > 0")
        if self.age_sd < 0 or self.face_log_sd < 0 or self.extra_contract_rate < 0:
            raise InvalidConfig("spread parameters must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown SynthConfig fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise InvalidConfig("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def coefficient_vector(self, cause: str) -> np.ndarray:
        coefs = self.lapse_coefficients if cause == "lapse" else self.death_coefficients
        return np.array([float(coefs.get(k, 0.0)) for k in HAZARD_COVARIATES])


def _draw_covariates(cfg: SynthConfig, n: int, rng: np.random.Generator) -> dict:
    age = np.clip(rng.normal(cfg.age_mean, cfg.age_sd, n), 18.0, 85.0)
    genders = np.array(["M", "F", "U"])
    gender = genders[rng.choice(3, size=n, p=[cfg.gender_shares[g] for g in genders])]
    products = np.array(["P1", "P2", "P3"])
    product = products[rng.choice(3, size=n, p=[cfg.product_shares[p] for p in products])]
    n_contracts = 1 + rng.poisson(cfg.extra_contract_rate, n)
    log_z = rng.standard_normal(n)
    face = cfg.face_median * np.exp(cfg.face_log_sd * log_z)
    Z = np.column_stack(
        [
            (age - cfg.age_mean) / max(cfg.age_sd, 1e-12),
            n_contracts - 1.0,
            gender == "F",
            gender == "U",
            product == "P2",
            product == "P3",
            log_z,
        ]
    ).astype(float)
    return dict(age=age, gender=gender, product=product, n_contracts=n_contracts, face=face, Z=Z)


def _calibrate(cfg: SynthConfig, rng: np.random.Generator, n_calib: int = 20_000):
    """Solve for (lapse rate, death rate, entry window) matching the targets.

    Expectations are computed in closed form given each calibration subject's
    hazards and a fixed uniform entry draw, so the residuals are smooth in the
    parameters.
    """
    cov = _draw_covariates(cfg, n_calib, rng)
    u = 1.0 - rng.random(n_calib)
    el = np.exp(cov["Z"] @ cfg.coefficient_vector("lapse"))
    ed = np.exp(cov["Z"] @ cfg.coefficient_vector("death"))
    target = np.array(
        [cfg.state_shares["lapsed"], cfg.state_shares["death"], cfg.mean_seniority]
    )

    def moments(theta):
        lam_l, lam_d, window = np.exp(theta)
        a, b = lam_l * el, lam_d * ed
        h = a + b
        C = window * u
        p_event = -np.expm1(-h * C)
        return np.array(
            [np.mean(a / h * p_event), np.mean(b / h * p_event), np.mean(p_event / h)]
        )

    def resid(theta):
        return (moments(theta) - target) / np.array([0.01, 0.01, 1.0])

    x0 = np.log([0.02, 0.015, 2.0 * cfg.mean_seniority])
    sol = optimize.least_squares(resid, x0, method="lm", xtol=1e-12, ftol=1e-12)
    achieved = moments(sol.x)
    if np.any(np.abs(achieved - target) > np.array([1e-4, 1e-4, 1e-2])):
        raise InvalidConfig(
            "state_shares/mean_seniority are not jointly attainable with these hazards "
            f"(closest: lapsed={achieved[0]:.4f}, death={achieved[1]:.4f}, "
            f"mean_seniority={achieved[2]:.3f})"
        )
    return tuple(np.exp(sol.x))


def generate_synthetic(cfg: SynthConfig) -> PortfolioDataset:
    """Draw a synthetic portfolio; a pure function of ``cfg``."""
    calib_ss, draw_ss = np.random.SeedSequence(int(cfg.seed)).spawn(2)
    lam_l, lam_d, window = _calibrate(cfg, np.random.default_rng(calib_ss))
    rng = np.random.default_rng(draw_ss)
    n = int(cfg.n_subjects)
    cov = _draw_covariates(cfg, n, rng)
    rate_l = lam_l * np.exp(cov["Z"] @ cfg.coefficient_vector("lapse"))
    rate_d = lam_d * np.exp(cov["Z"] @ cfg.coefficient_vector("death"))
    t_lapse = rng.exponential(1.0, n) / rate_l
    t_death = rng.exponential(1.0, n) / rate_d
    t_cens = window * (1.0 - rng.random(n))
    seniority = np.minimum(np.minimum(t_lapse, t_death), t_cens)
    event = np.where(
        t_cens <= np.minimum(t_lapse, t_death),
        EventCode.ACTIVE,
        np.where(t_lapse < t_death, EventCode.LAPSED, EventCode.DEATH),
    )
    seniority = np.maximum(np.round(seniority, 4), 1e-4)
    start_year = np.floor(cfg.observation_year - t_cens).astype(int)
    width = max(7, len(str(n)))
    records = tuple(
        PolicyRecord(
            subject_id=f"S{i:0{width}d}",
            age_at_subscription=float(np.round(cov["age"][i], 1)),
            n_contracts=int(cov["n_contracts"][i]),
            gender=Gender(cov["gender"][i]),
            product=Product(cov["product"][i]),
            start_year=int(start_year[i]),
            seniority=float(seniority[i]),
            face_amount=float(np.round(cov["face"][i], 2)),
            event=EventCode(int(event[i])),
        )
        for i in range(n)
    )
    return PortfolioDataset(records)


# ---------------------------------------------------------------------------
# Resampling


def _n_of(data) -> int:
    return data if isinstance(data, (int, np.integer)) else len(data)


def kfold_split(data, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition; returns ``(train_idx, validation_idx)`` pairs.

    ``data`` may be a dataset or a row count.  Validation folds are disjoint,
    cover every index and differ in size by at most one.
    """
    n = _n_of(data)
    if not isinstance(k, (int, np.integer)) or k < 2 or k > n:
        raise BadK(f"k must be an integer in [2, n={n}], got {k!r}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for f in folds:
        mask = np.ones(n, dtype=bool)
        mask[f] = False
        out.append((np.flatnonzero(mask), np.sort(f)))
    return out


def train_test_split(data, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n = _n_of(data)
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = min(max(1, int(round(test_fraction * n))), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# ---------------------------------------------------------------------------
# Summaries


def _mean_or_none(x: np.ndarray):
    return float(np.mean(x)) if len(x) else None


def summary_stats(data: PortfolioDataset) -> dict:
    """State, gender and product shares plus seniority / face-amount means."""
    if data is None or len(data) == 0:
        raise EmptyDataset("summary of an empty dataset")
    ev = data.events
    sen = data.durations
    face = data.face_amounts
    genders = np.array([r.gender.value for r in data.records])
    products = np.array([r.product.value for r in data.records])
    states = {"active": EventCode.ACTIVE, "lapsed": EventCode.LAPSED, "death": EventCode.DEATH}
    return {
        "n": len(data),
        "state_shares": {k: float(np.mean(ev == v)) for k, v in states.items()},
        "gender_shares": {g.value: float(np.mean(genders == g.value)) for g in Gender},
        "product_shares": {p.value: float(np.mean(products == p.value)) for p in Product},
        "mean_seniority": float(np.mean(sen)),
        "mean_seniority_by_state": {k: _mean_or_none(sen[ev == v]) for k, v in states.items()},
        "mean_face_amount": float(np.mean(face)),
        "mean_face_amount_by_state": {k: _mean_or_none(face[ev == v]) for k, v in states.items()},
    }
