"""Future customer lifetime value, portfolio values and retention gain.

A strategy offers targeted subjects an annual incentive ``delta`` (fraction of
face amount) at a contact cost ``c``; a targeted lapser accepts with
probability ``gamma`` and then follows the acceptant retention curve.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .survival.retention import RetentionMatrices


class ValuationError(ValueError):
    pass


class LengthMismatch(ValuationError):
    pass


class DiscountOutOfRange(ValuationError):
    pass


class AlignmentError(ValuationError):
    pass


class InvalidStrategy(ValuationError):
    pass


@dataclass(frozen=True)
class StrategyParams:
    """Lapse management strategy ``(p, delta, gamma, c, d, T)``.

    Rates are fractions (``p=0.025`` is 2.5% of face amount per year).
    """

    p: float
    delta: float
    gamma: float
    c: float
    d: float
    T: int

    def __post_init__(self):
        if not (0 <= self.delta < self.p):
            raise InvalidStrategy(f"need 0 <= delta < p, got delta={self.delta}, p={self.p}")
        if not (0 <= self.gamma <= 1):
            raise InvalidStrategy(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.c < 0:
            raise InvalidStrategy(f"contact cost must be >= 0, got {self.c}")
        if self.d <= -1:
            raise DiscountOutOfRange(f"discount rate must exceed -1, got {self.d}")
        if int(self.T) != self.T or self.T < 0:
            raise InvalidStrategy(f"horizon must be a whole number of years >= 0, got {self.T}")
        object.__setattr__(self, "T", int(self.T))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyParams":
        return cls(**{k: d[k] for k in ("p", "delta", "gamma", "c", "d", "T")})


def discount_factors(d: float, T: int) -> np.ndarray:
    if d <= -1:
        raise DiscountOutOfRange(f"discount rate must exceed -1, got {d}")
    return (1.0 + d) ** -np.arange(T + 1, dtype=float)


def future_clv(p, F: float, r, d, T: int | None = None) -> float:
    """Discounted expected profit ``sum_t p * F * r_t / (1 + d)^t`` for t = 0..T.

    ``p`` and ``d`` may also be length-(T+1) vectors for time-varying rates.
    """
    r = np.asarray(r, dtype=float)
    if r.ndim != 1:
        raise LengthMismatch("r must be a vector")
    if T is None:
        T = r.size - 1
    if r.size != T + 1:
        raise LengthMismatch(f"len(r)={r.size} != T+1={T + 1}")
    d = np.broadcast_to(np.asarray(d, dtype=float), r.shape)
    if np.any(d <= -1):
        raise DiscountOutOfRange("discount rate must exceed -1")
    p = np.broadcast_to(np.asarray(p, dtype=float), r.shape)
    t = np.arange(T + 1, dtype=float)
    return math.fsum(p * F * r / (1.0 + d) ** t)


def clv_vector(p: float, F, R, d: float) -> np.ndarray:
    """Row-wise future CLV for face amounts ``F`` (n,) and retention rows ``R`` (n, T+1)."""
    R = np.asarray(R, dtype=float)
    disc = discount_factors(d, R.shape[1] - 1)
    return p * np.asarray(F, dtype=float) * (R @ disc)


def _portfolio_arrays(data, matrices: RetentionMatrices, s: StrategyParams):
    y = np.asarray(data.lapsed).astype(bool)
    F = np.asarray(data.face_amounts, dtype=float)
    if len(matrices) != y.size:
        raise AlignmentError(f"{len(matrices)} matrix rows for {y.size} subjects")
    if matrices.horizon < s.T:
        raise LengthMismatch(f"matrices cover {matrices.horizon} years, strategy needs {s.T}")
    m = matrices.truncate(s.T) if matrices.horizon > s.T else matrices
    return y, F, m.r_acceptant, m.r_lapser


def _predictions(predictions, n) -> np.ndarray:
    pred = np.asarray(predictions)
    if pred.shape != (n,):
        raise AlignmentError(f"predictions have shape {pred.shape}, expected ({n},)")
    return pred.astype(bool)


def individual_gain(record, r_acc_row, r_lap_row, s: StrategyParams) -> float:
    """Expected profit of targeting one subject (negative means a loss)."""
    F = record.face_amount
    if record.lapsed:
        keep = future_clv(s.p - s.delta, F, r_acc_row, s.d, s.T)
        lose = future_clv(s.p, F, r_lap_row, s.d, s.T)
        return s.gamma * (keep - lose) - s.c
    return -future_clv(s.delta, F, r_acc_row, s.d, s.T) - s.c


def individual_gains(data, matrices: RetentionMatrices, s: StrategyParams) -> np.ndarray:
    """Vector of per-subject gains, same formula as :func:`individual_gain`."""
    y, F, ra, rl = _portfolio_arrays(data, matrices, s)
    gain_lapser = s.gamma * (clv_vector(s.p - s.delta, F, ra, s.d) - clv_vector(s.p, F, rl, s.d)) - s.c
    gain_stayer = -clv_vector(s.delta, F, ra, s.d) - s.c
    return np.where(y, gain_lapser, gain_stayer)


def _control_terms(y, F, ra, rl, s: StrategyParams) -> list:
    return [clv_vector(s.p, F, ra, s.d)[~y], clv_vector(s.p, F, rl, s.d)[y]]


def _managed_terms(y, F, ra, rl, s: StrategyParams, pred) -> list:
    clv_acc = clv_vector(s.p, F, ra, s.d)
    clv_lap = clv_vector(s.p, F, rl, s.d)
    clv_acc_net = clv_vector(s.p - s.delta, F, ra, s.d)
    return [
        clv_acc[~y & ~pred],
        clv_lap[y & ~pred],
        clv_acc_net[~y & pred],
        s.gamma * clv_acc_net[y & pred],
        (1.0 - s.gamma) * clv_lap[y & pred],
        np.full(int(pred.sum()), -float(s.c)),
    ]


def control_portfolio_value(data, matrices: RetentionMatrices, s: StrategyParams) -> float:
    """Hypothetical no-action value: stayers on r^acceptant, lapsers on r^lapser."""
    y, F, ra, rl = _portfolio_arrays(data, matrices, s)
    return math.fsum(np.concatenate(_control_terms(y, F, ra, rl, s)))


def lapse_managed_portfolio_value(data, matrices: RetentionMatrices, s: StrategyParams, predictions) -> float:
    """Portfolio value when subjects with ``predictions == 1`` are targeted.

    Evaluated term by term: untargeted stayers and lapsers keep their curves,
    targeted stayers pay the incentive, targeted lapsers accept with
    probability gamma, and every target costs ``c``.
    """
    y, F, ra, rl = _portfolio_arrays(data, matrices, s)
    pred = _predictions(predictions, y.size)
    return math.fsum(np.concatenate(_managed_terms(y, F, ra, rl, s, pred)))


def retention_gain(data, matrices: RetentionMatrices, s: StrategyParams, predictions) -> float:
    """Managed minus control portfolio value.

    Both values' terms go through a single exact summation so the difference
    does not lose digits to cancellation between two large totals.
    """
    y, F, ra, rl = _portfolio_arrays(data, matrices, s)
    pred = _predictions(predictions, y.size)
    managed = _managed_terms(y, F, ra, rl, s, pred)
    control = [-t for t in _control_terms(y, F, ra, rl, s)]
    return math.fsum(np.concatenate(managed + control))


def retention_gain_from_gains(z, predictions) -> float:
    """Sum of individual gains over targeted subjects."""
    z = np.asarray(z, dtype=float)
    pred = _predictions(predictions, z.size)
    return math.fsum(z[pred])


def optimal_retention_gain(z) -> float:
    """Largest attainable retention gain: target exactly the subjects with positive gain."""
    z = np.asarray(z, dtype=float)
    return math.fsum(z[z > 0])


def profit_targets(z) -> np.ndarray:
    """1 where targeting is strictly profitable, else 0."""
    return (np.asarray(z, dtype=float) > 0).astype(np.int8)


@dataclass
class ValuationResult:
    z: np.ndarray
    y_tilde: np.ndarray
    cpv: float
    clv_per_subject: np.ndarray
    strategy: StrategyParams

    def to_csv_string(self, subject_ids, y) -> str:
        buf = io.StringIO()
        buf.write("subject_id,y,z,y_tilde,clv\n")
        for sid, yi, zi, yt, clv in zip(subject_ids, y, self.z, self.y_tilde, self.clv_per_subject):
            buf.write(f"{sid},{int(yi)},{float(zi)!r},{int(yt)},{float(clv)!r}\n")
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "cpv": self.cpv,
            "n": int(self.z.size),
            "n_targets": int(self.y_tilde.sum()),
            "optimal_retention_gain": optimal_retention_gain(self.z),
            "strategy": self.strategy.to_dict(),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def relabel_targets(data, matrices: RetentionMatrices, s: StrategyParams) -> ValuationResult:
    """Individual gains and the profit-driven target ``1(z > 0)``.

    ``clv_per_subject`` is each subject's no-action CLV (r^acceptant for
    stayers, r^lapser for lapsers).
    """
    y, F, ra, rl = _portfolio_arrays(data, matrices, s)
    z = individual_gains(data, matrices, s)
    clv = np.where(y, clv_vector(s.p, F, rl, s.d), clv_vector(s.p, F, ra, s.d))
    return ValuationResult(
        z=z,
        y_tilde=profit_targets(z),
        cpv=math.fsum(clv),
        clv_per_subject=clv,
        strategy=s,
    )
