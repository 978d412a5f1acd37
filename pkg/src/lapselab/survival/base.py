"""Shared pieces of the survival models: cause recoding and input checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..portfolio import EventCode


class NotFitted(RuntimeError):
    pass


class SchemaMismatch(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


@dataclass(frozen=True)
class CauseRecoding:
    """How competing events map onto a single event indicator.

    ``combined``: lapse or death, whichever comes first, is the event.
    ``cause_specific``: only ``cause`` counts; the competing cause is censored.
    """

    mode: str = "combined"
    cause: EventCode | None = None

    def __post_init__(self):
        if self.mode == "combined":
            if self.cause is not None:
                raise ValueError("combined recoding takes no cause")
        elif self.mode == "cause_specific":
            if self.cause not in (EventCode.LAPSED, EventCode.DEATH):
                raise ValueError("cause must be LAPSED or DEATH")
            object.__setattr__(self, "cause", EventCode(self.cause))
        else:
            raise ValueError(f"unknown recoding mode {self.mode!r}")

    @classmethod
    def combined(cls) -> "CauseRecoding":
        return cls("combined")

    @classmethod
    def cause_specific(cls, cause) -> "CauseRecoding":
        return cls("cause_specific", EventCode(cause))

    def apply(self, event_codes) -> np.ndarray:
        codes = np.asarray(event_codes).astype(int)
        if self.mode == "combined":
            return codes != EventCode.ACTIVE
        return codes == self.cause

    @property
    def label(self) -> str:
        return "combined" if self.mode == "combined" else f"cause_{self.cause.name.lower()}"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "cause": None if self.cause is None else int(self.cause)}

    @classmethod
    def from_dict(cls, d: dict) -> "CauseRecoding":
        cause = d.get("cause")
        return cls(d["mode"], None if cause is None else EventCode(cause))


def prepare(X, durations, events, recoding: CauseRecoding | None = None):
    """Validate survival inputs; recode ``events`` when a recoding is given."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    durations = np.asarray(durations, dtype=float)
    events = recoding.apply(events) if recoding is not None else np.asarray(events).astype(bool)
    if X.ndim != 2 or X.shape[0] != durations.shape[0] or events.shape != durations.shape:
        raise ValueError("X, durations and events must have matching first dimension")
    if durations.size and (not np.all(np.isfinite(durations)) or durations.min() <= 0):
        raise ValueError("durations must be finite and > 0")
    if not np.all(np.isfinite(X)):
        raise ValueError("covariates must be finite")
    return X, durations, events


def as_time_matrix(times, n: int) -> tuple[np.ndarray, bool]:
    """Broadcast a shared grid or per-subject times to shape (n, m)."""
    t = np.asarray(times, dtype=float)
    shared = t.ndim <= 1
    t = np.atleast_1d(t)
    if shared:
        t = np.broadcast_to(t, (n, t.size))
    elif t.shape[0] != n:
        raise ValueError("per-subject time matrix must have one row per subject")
    if np.any(t < 0):
        raise ValueError("times must be >= 0")
    return t, shared


def check_features(model_names, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :] if len(model_names) != 1 else X[:, None]
    if X.shape[1] != len(model_names):
        raise SchemaMismatch(f"model expects {len(model_names)} features, got {X.shape[1]}")
    return X
