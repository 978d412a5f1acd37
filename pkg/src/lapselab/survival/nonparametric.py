"""Nonparametric estimators: Kaplan-Meier, Nelson-Aalen, Aalen-Johansen CIF,
the two-sample log-rank test and Harrell's concordance index."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SurvivalInputError(ValueError):
    pass


class Empty(SurvivalInputError):
    pass


class Degenerate(SurvivalInputError):
    pass


class NoComparablePairs(SurvivalInputError):
    pass


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function.

    Takes ``initial`` on ``[0, times[0])`` and ``values[k]`` on
    ``[times[k], times[k+1])``.  Beyond the last knot the last value is
    carried forward.
    """

    times: np.ndarray
    values: np.ndarray
    initial: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        table = np.concatenate(([self.initial], self.values))
        return table[idx]

    def left_limit(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left")
        table = np.concatenate(([self.initial], self.values))
        return table[idx]

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "values": self.values.tolist(), "initial": self.initial}

    @classmethod
    def from_dict(cls, d: dict) -> "StepFunction":
        return cls(np.asarray(d["times"], dtype=float), np.asarray(d["values"], dtype=float), float(d["initial"]))


def _check(durations, events):
    durations = np.asarray(durations, dtype=float)
    events = np.asarray(events).astype(bool)
    if durations.ndim != 1 or durations.shape != events.shape:
        raise SurvivalInputError("durations and events must be 1-d arrays of equal length")
    if durations.size == 0:
        raise Empty("no samples")
    return durations, events


def risk_table(durations, events):
    """Distinct event times with their event counts and at-risk counts."""
    durations, events = _check(durations, events)
    times, n_events = np.unique(durations[events], return_counts=True)
    sorted_d = np.sort(durations)
    at_risk = durations.size - np.searchsorted(sorted_d, times, side="left")
    return times, n_events.astype(float), at_risk.astype(float)


def kaplan_meier(durations, events) -> StepFunction:
    """Product-limit survival estimate S(t)."""
    times, d, n = risk_table(durations, events)
    return StepFunction(times, np.cumprod(1.0 - d / n), 1.0)


def nelson_aalen(durations, events) -> StepFunction:
    """Cumulative hazard estimate with increments d_k / n_k."""
    times, d, n = risk_table(durations, events)
    return StepFunction(times, np.cumsum(d / n), 0.0)


def cause_specific_cif(durations, event_codes, cause) -> StepFunction:
    """Aalen-Johansen cumulative incidence of ``cause``.

    ``event_codes`` uses 0 for censoring and positive integers for causes.
    The estimate jumps at every distinct event time (any cause) by
    ``S(t-) * d_cause(t) / n(t)`` where ``S`` is the all-cause Kaplan-Meier.
    """
    durations = np.asarray(durations, dtype=float)
    codes = np.asarray(event_codes).astype(int)
    if durations.size == 0:
        raise Empty("no samples")
    cause = int(cause)
    if cause <= 0:
        raise SurvivalInputError("cause must be a positive event code")
    times, d_all, n = risk_table(durations, codes > 0)
    surv = np.cumprod(1.0 - d_all / n)
    surv_left = np.concatenate(([1.0], surv[:-1]))
    hit = codes == cause
    d_cause = np.zeros_like(times)
    if hit.any():
        t_c, c_c = np.unique(durations[hit], return_counts=True)
        d_cause[np.searchsorted(times, t_c)] = c_c
    return StepFunction(times, np.cumsum(surv_left * d_cause / n), 0.0)


def logrank_statistic(durations_a, events_a, durations_b, events_b) -> float:
    """Two-sample log-rank chi-square statistic, (O_a - E_a)^2 / Var."""
    da, ea = _check(durations_a, events_a)
    db, eb = _check(durations_b, events_b)
    durations = np.concatenate([da, db])
    events = np.concatenate([ea, eb])
    if not events.any():
        raise Degenerate("no events in either group")
    times, d, n = risk_table(durations, events)
    in_a = np.concatenate([np.ones(da.size, bool), np.zeros(db.size, bool)])
    sorted_a = np.sort(da)
    n_a = da.size - np.searchsorted(sorted_a, times, side="left")
    d_a = np.zeros_like(times)
    if (events & in_a).any():
        t_a, c_a = np.unique(durations[events & in_a], return_counts=True)
        d_a[np.searchsorted(times, t_a)] = c_a
    frac = n_a / n
    expected = d * frac
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(n > 1, d * frac * (1.0 - frac) * (n - d) / (n - 1.0), 0.0)
    v = var.sum()
    if v <= 0:
        return 0.0
    return float((d_a.sum() - expected.sum()) ** 2 / v)


def concordance_index(durations, events, risk_scores, *, chunk: int = 2048) -> float:
    """Harrell's C: share of comparable pairs ordered correctly by risk.

    A pair (i, j) is comparable when i had the event and ``T_i < T_j``.
    Higher risk scores mean earlier expected failure; tied scores count 1/2.
    """
    durations, events = _check(durations, events)
    scores = np.asarray(risk_scores, dtype=float)
    if scores.shape != durations.shape:
        raise SurvivalInputError("risk_scores must align with durations")
    order = np.argsort(durations, kind="stable")
    t, e, s = durations[order], events[order], scores[order]
    concordant = 0.0
    comparable = 0
    idx_events = np.flatnonzero(e)
    for start in range(0, idx_events.size, chunk):
        rows = idx_events[start : start + chunk]
        later = t[None, :] > t[rows, None]
        higher = s[rows, None] > s[None, :]
        tied = s[rows, None] == s[None, :]
        comparable += int(later.sum())
        concordant += float((later & higher).sum()) + 0.5 * float((later & tied).sum())
    if comparable == 0:
        raise NoComparablePairs("no comparable pairs")
    return concordant / comparable
