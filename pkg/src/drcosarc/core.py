"""Core data types and the weighted-quantile machinery.

Right-censored observations are triplets ``(x, t_tilde, event)`` where
``t_tilde = min(T, C)`` and ``event`` indicates that the survival time was
observed (``T < C``).  ``Dataset`` stores them column-wise as numpy arrays;
``ObservedRecord`` / ``LatentRecord`` give a record-level view.

``DiscreteDistribution`` represents the weighted score distributions used by
conformal calibration, including a first-class ``+inf`` atom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "ObservedRecord",
    "LatentRecord",
    "Dataset",
    "LatentSample",
    "DiscreteDistribution",
    "weighted_quantile",
    "normalized_weights",
    "read_dataset_csv",
    "write_dataset_csv",
]


@dataclass(frozen=True)
class ObservedRecord:
    """One right-censored observation: covariates, observed time, event flag."""

    x: np.ndarray
    t_tilde: float
    event: bool

    def __post_init__(self):
        if not self.t_tilde > 0:
            raise ValueError(f"observed time must be positive, got {self.t_tilde}")


@dataclass(frozen=True)
class LatentRecord:
    """One latent observation with both the survival and censoring time."""

    x: np.ndarray
    t: float
    c: float

    def __post_init__(self):
        if not (self.t > 0 and self.c > 0):
            raise ValueError("latent times must be positive")

    def observe(self) -> ObservedRecord:
        return ObservedRecord(self.x, min(self.t, self.c), self.t < self.c)


class Dataset:
    """Column-wise container for right-censored data.

    Parameters
    ----------
    x : (n, p) array of covariates
    time : (n,) array of positive observed times
    event : (n,) boolean array, True where the event preceded censoring
    """

    def __init__(self, x, time, event):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        time = np.asarray(time, dtype=float).ravel()
        event = np.asarray(event).astype(bool).ravel()
        if x.shape[0] != time.shape[0] or time.shape[0] != event.shape[0]:
            raise ValueError("x, time and event must have matching lengths")
        if x.shape[0] == 0:
            raise ValueError("dataset must contain at least one record")
        if not np.all(np.isfinite(x)):
            raise ValueError("covariates must be finite")
        if not np.all(np.isfinite(time)) or np.any(time <= 0):
            raise ValueError("observed times must be positive and finite")
        self.x = x
        self.time = time
        self.event = event

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[ObservedRecord]:
        for i in range(self.n):
            yield ObservedRecord(self.x[i], float(self.time[i]), bool(self.event[i]))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.time[idx], self.event[idx])

    def flip_events(self) -> "Dataset":
        """Swap the roles of event and censoring (used to fit censoring models)."""
        return Dataset(self.x, self.time, ~self.event)


@dataclass(frozen=True)
class LatentSample:
    """Latent draws (x, t, c) before right-censoring is applied."""

    x: np.ndarray
    t: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if not (self.x.shape[0] == self.t.shape[0] == self.c.shape[0]):
            raise ValueError("latent arrays must have matching lengths")
        if np.any(self.t <= 0) or np.any(self.c <= 0):
            raise ValueError("latent times must be positive")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def __iter__(self) -> Iterator[LatentRecord]:
        for i in range(self.n):
            yield LatentRecord(self.x[i], float(self.t[i]), float(self.c[i]))


class DiscreteDistribution:
    """A finite distribution over extended-real atoms, +inf allowed.

    Atoms are stored sorted ascending (so any +inf atom ends up last) and
    masses must sum to one within 1e-9.
    """

    def __init__(self, values, masses):
        values = np.asarray(values, dtype=float).ravel()
        masses = np.asarray(masses, dtype=float).ravel()
        if values.size == 0:
            raise ValueError("empty distribution")
        if values.shape != masses.shape:
            raise ValueError("values and masses must have matching lengths")
        if np.any(np.isnan(values)):
            raise ValueError("atom values must not be NaN")
        if np.any(masses < 0):
            raise ValueError("masses must be nonnegative")
        total = float(masses.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"masses must sum to 1, got {total}")
        order = np.argsort(values, kind="stable")
        self.values = values[order]
        self.masses = masses[order]

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def from_atoms(cls, atoms: Sequence[tuple[float, float]]) -> "DiscreteDistribution":
        vals = [a[0] for a in atoms]
        mass = [a[1] for a in atoms]
        return cls(vals, mass)


def weighted_quantile(dist: DiscreteDistribution, level: float) -> float:
    """Smallest atom value whose cumulative mass reaches ``level``.

    Right-continuous generalized inverse: returns the first value v with
    cumulative mass at v >= level.  May return +inf when the upper tail is
    carried by an infinity atom.
    """
    if dist is None or len(dist) == 0:
        raise ValueError("empty distribution")
    if not (0.0 < level <= 1.0):
        raise ValueError(f"level must lie in (0, 1], got {level}")
    cum = np.cumsum(dist.masses)
    # guard against cumulative rounding leaving the last entry below 1
    cum[-1] = max(cum[-1], 1.0)
    idx = int(np.searchsorted(cum, level, side="left"))
    return float(dist.values[idx])


def normalized_weights(raw_weights, test_weight: float):
    """Normalize calibration weights together with the test-point weight.

    Returns ``(masses, p_inf)`` where ``masses[i] = w_i / (sum_j w_j + w_test)``
    and ``p_inf`` is the test point's share.  Everything sums to one.
    """
    raw = np.asarray(raw_weights, dtype=float).ravel()
    if np.any(raw < 0) or test_weight < 0:
        raise ValueError("weights must be nonnegative")
    total = float(raw.sum() + test_weight)
    if total <= 0:
        raise ValueError("degenerate weights: all weights zero")
    return raw / total, float(test_weight / total)


# ---------------------------------------------------------------------------
# CSV ingest / emit
#
# Format: header row with columns x1..xp, time, event.  Times equal to zero
# are replaced by half the smallest nonzero time; non-numeric or missing
# cells are rejected.
# ---------------------------------------------------------------------------

def _covariate_columns(columns) -> list[str]:
    xcols = [c for c in columns if c.startswith("x")]
    expected = [f"x{i}" for i in range(1, len(xcols) + 1)]
    if sorted(xcols) != sorted(expected):
        raise ValueError(
            f"covariate columns must be named x1..xp, got {sorted(xcols)}"
        )
    return expected


def read_dataset_csv(path) -> Dataset:
    """Load a right-censored dataset from CSV (columns x1..xp, time, event)."""
    frame = pd.read_csv(path)
    cols = list(frame.columns)
    if "time" not in cols or "event" not in cols:
        raise ValueError("dataset CSV must contain 'time' and 'event' columns")
    extra = [c for c in cols if c not in ("time", "event") and not c.startswith("x")]
    if extra:
        raise ValueError(f"unexpected columns in dataset CSV: {extra}")
    xcols = _covariate_columns([c for c in cols if c not in ("time", "event")])
    if not xcols:
        raise ValueError("dataset CSV must contain at least one covariate column")
    if frame.isna().any().any():
        raise ValueError("dataset CSV contains missing cells")
    try:
        x = frame[xcols].to_numpy(dtype=float)
        time = frame["time"].to_numpy(dtype=float)
        event = frame["event"].to_numpy(dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"dataset CSV contains non-numeric cells: {exc}") from None
    if not np.all(np.isin(event, (0.0, 1.0))):
        raise ValueError("event column must contain only 0/1 values")
    if np.any(time < 0):
        raise ValueError("times must be nonnegative")
    zero = time == 0.0
    if np.any(zero):
        nonzero = time[~zero]
        if nonzero.size == 0:
            raise ValueError("all times are zero; cannot apply the zero-time rule")
        time = time.copy()
        time[zero] = 0.5 * nonzero.min()
    return Dataset(x, time, event.astype(bool))


def write_dataset_csv(dataset: Dataset, path) -> None:
    frame = pd.DataFrame(
        dataset.x, columns=[f"x{i}" for i in range(1, dataset.p + 1)]
    )
    frame["time"] = dataset.time
    frame["event"] = dataset.event.astype(int)
    frame.to_csv(path, index=False)
