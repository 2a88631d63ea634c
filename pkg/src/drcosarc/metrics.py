"""Performance metrics: coverage, censored coverage bounds, normalized LPBs,
and the imputation-stability coefficient of variation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MethodResult",
    "CoverageBounds",
    "coverage",
    "coverage_bounds",
    "normalized_lpb",
    "stability_cv",
    "mean_and_two_se",
]


@dataclass
class MethodResult:
    """Per-repetition output of one calibration method on a test set."""

    method: str
    lpbs: np.ndarray
    seed: tuple | None = None
    diagnostics: dict = field(default_factory=dict)
    runtime_ms: float = 0.0

    def __post_init__(self):
        self.lpbs = np.asarray(self.lpbs, dtype=float).ravel()
        if self.lpbs.size and (np.any(~np.isfinite(self.lpbs)) or np.any(self.lpbs < 0)):
            raise ValueError("LPBs must be finite and nonnegative")


@dataclass(frozen=True)
class CoverageBounds:
    """Empirical sandwich for coverage when test outcomes are censored."""

    low: float
    mid: float
    upp: float

    def __post_init__(self):
        if not (self.low - 1e-12 <= self.mid <= self.upp + 1e-12):
            raise ValueError("coverage bounds must satisfy low <= mid <= upp")


def coverage(lpbs, true_times) -> float:
    """Fraction of test points whose true time reaches the bound (ties covered)."""
    lpbs = np.asarray(lpbs, dtype=float).ravel()
    times = np.asarray(true_times, dtype=float).ravel()
    if lpbs.shape != times.shape:
        raise ValueError("lpbs and times must have equal lengths")
    return float(np.mean(times >= lpbs))


def coverage_bounds(lpbs, observed_times, events) -> CoverageBounds:
    """Bounds on unobservable coverage from a censored test set.

    The lower bound treats every bound exceeding the observed time as a
    violation; the upper bound only counts those where the event was
    actually observed.
    """
    lpbs = np.asarray(lpbs, dtype=float).ravel()
    t_obs = np.asarray(observed_times, dtype=float).ravel()
    e = np.asarray(events).astype(bool).ravel()
    if not (lpbs.shape == t_obs.shape == e.shape):
        raise ValueError("lpbs, times, and events must have equal lengths")
    low = float(np.mean(lpbs <= t_obs))
    upp = float(1.0 - np.mean((lpbs > t_obs) & e))
    return CoverageBounds(low=low, mid=0.5 * (low + upp), upp=upp)


def normalized_lpb(lpbs, oracle_lpbs) -> float:
    """Mean bound divided by the mean oracle bound."""
    lpbs = np.asarray(lpbs, dtype=float).ravel()
    oracle = np.asarray(oracle_lpbs, dtype=float).ravel()
    denom = float(oracle.mean())
    if denom <= 0:
        raise ValueError("oracle mean must be positive")
    return float(lpbs.mean() / denom)


def stability_cv(lpb_matrix) -> float:
    """Mean per-test-point coefficient of variation across imputation reps.

    Rows are repetitions, columns test points.  Points whose mean bound is
    zero contribute 0 (a vacuous bound is perfectly stable).
    """
    mat = np.atleast_2d(np.asarray(lpb_matrix, dtype=float))
    if mat.shape[0] < 2:
        raise ValueError("stability_cv needs at least two repetitions")
    means = mat.mean(axis=0)
    sds = mat.std(axis=0, ddof=1)
    cv = np.where(means > 0, sds / np.where(means > 0, means, 1.0), 0.0)
    return float(cv.mean())


def mean_and_two_se(values) -> tuple[float, float]:
    """Sample mean and twice its standard error."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), float("nan")
    return float(v.mean()), float(2.0 * v.std(ddof=1) / np.sqrt(v.size))
