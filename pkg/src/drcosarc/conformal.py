"""Weighted conformal calibration of survival lower prediction bounds.

Two calibrators operate on an imputed calibration set:

* ``FixedCutoffCalibrator`` — filters records whose (imputed) censoring time
  reaches a global cutoff c0, scores them with the quantile-regression form
  ``V_i = q_alpha(X_i) - (t_tilde_i ^ c0)``, and inverts a weighted score
  quantile, with weights 1 / P(C >= c0 | X).
* ``AdaptiveCalibrator`` — sweeps a monotone family of candidate bounds
  indexed by a scalar, estimates the miscoverage rate of each candidate with
  covariate-shift weights 1 / P(C >= candidate | X), and selects the largest
  index whose running-sup miscoverage stays below alpha.  The sweep only
  needs to visit the finite breakpoint set where any indicator can flip.

Both preliminary bounds are finished by taking the minimum with the raw
model quantile, which is what makes the procedure robust to a poor
censoring model when the survival model happens to be good (and vice
versa).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, DiscreteDistribution, normalized_weights, weighted_quantile
from .impute import ImputedDataset
from .models import ConditionalModel

__all__ = [
    "CalibrationDiagnostics",
    "CandidateFamily",
    "QuantileLevelFamily",
    "ShiftFamily",
    "FixedCutoffCalibrator",
    "AdaptiveCalibrator",
    "default_cutoff",
    "fixed_cutoff_lpb",
    "miscoverage_hat",
    "breakpoint_grid",
    "adaptive_lpb",
    "dr_adjust",
    "drcosarc_fixed_batch",
    "drcosarc_adaptive_batch",
    "DEFAULT_WEIGHT_FLOOR",
]

DEFAULT_WEIGHT_FLOOR = 0.02
_BREAKPOINT_TOL = 1e-8


@dataclass
class CalibrationDiagnostics:
    """Bookkeeping emitted by one calibration run."""

    n_input: int = 0
    n_filtered: int | None = None
    selected: float | None = None  # last eta (fixed) or a_hat (adaptive)
    p_inf: float | None = None
    weight_floor_hits: int = 0
    infinite_eta: int = 0
    empty_filtered: bool = False
    grid_size: int | None = None


def default_cutoff(data: Dataset) -> float:
    """Median of the observed censoring times (lower median on even counts)."""
    censored = np.sort(data.time[~data.event])
    if censored.size == 0:
        raise ValueError("cannot tune c0: no censored records")
    return float(censored[(censored.size - 1) // 2])


# ---------------------------------------------------------------------------
# Candidate bound families
# ---------------------------------------------------------------------------

class CandidateFamily:
    """A family of candidate bounds f(x, a), nondecreasing and continuous in a.

    The index a runs over [lo, hi]; a = lo is the most conservative
    candidate.  ``sup_index`` inverts the family by bisection.
    """

    lo = 0.0
    hi = 1.0

    def value(self, x, a):
        raise NotImplementedError

    def values_rows(self, X, a):
        """f(x_i, a_i) for paired rows and indices (a may be scalar)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        a = np.broadcast_to(np.asarray(a, dtype=float), (X.shape[0],))
        return np.array([self.value(X[i], float(a[i])) for i in range(X.shape[0])])

    def sup_index(self, x, limit: float, tol: float = _BREAKPOINT_TOL) -> float:
        """sup{a in [lo, hi] : f(x, a) <= limit}, or lo when the set is empty."""
        lo, hi = self.lo, self.hi
        if self.value(x, hi) <= limit:
            return hi
        if self.value(x, lo) > limit:
            return lo
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if self.value(x, mid) <= limit:
                lo = mid
            else:
                hi = mid
        return lo

    def sup_indices(self, X, limits, tol: float = _BREAKPOINT_TOL) -> np.ndarray:
        """Vectorized ``sup_index`` across paired rows and limits."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        limits = np.asarray(limits, dtype=float)
        n = X.shape[0]
        lo = np.full(n, self.lo)
        hi = np.full(n, self.hi)
        at_hi = self.values_rows(X, hi) <= limits
        empty = self.values_rows(X, lo) > limits
        active = ~(at_hi | empty)
        span = self.hi - self.lo
        steps = max(int(math.ceil(math.log2(span / tol))), 1) if span > tol else 1
        for _ in range(steps):
            if not active.any():
                break
            mid = 0.5 * (lo + hi)
            le = self.values_rows(X, mid) <= limits
            lo = np.where(active & le, mid, lo)
            hi = np.where(active & ~le, mid, hi)
        out = np.where(at_hi, self.hi, lo)
        return np.where(empty, self.lo, out)


class QuantileLevelFamily(CandidateFamily):
    """Candidates are the model's conditional quantiles: f(x, a) = q_a(x)."""

    def __init__(self, surv: ConditionalModel):
        self.surv = surv

    def value(self, x, a):
        return self.surv.quantile(x, a)

    def values_rows(self, X, a):
        return self.surv.quantile_rows(X, a)


class ShiftFamily(CandidateFamily):
    """Candidates shift the raw alpha-quantile down: f = max(q_alpha - s, 0).

    Internally indexed by a in [0, 1] with shift s = scale * (1 - a), so the
    family is nondecreasing in a; a = 1 recovers the raw quantile and a = 0
    is fully conservative on the calibration range.
    """

    def __init__(self, surv: ConditionalModel, alpha: float, scale: float):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.surv = surv
        self.alpha = alpha
        self.scale = float(scale)

    def value(self, x, a):
        q = self.surv.quantile(x, self.alpha)
        return np.maximum(q - self.scale * (1.0 - np.asarray(a, dtype=float)), 0.0)

    def values_rows(self, X, a):
        q = self.surv.quantile_rows(X, self.alpha)
        a = np.broadcast_to(np.asarray(a, dtype=float), q.shape)
        return np.maximum(q - self.scale * (1.0 - a), 0.0)


# ---------------------------------------------------------------------------
# Fixed cutoff
# ---------------------------------------------------------------------------

@dataclass
class FixedCutoffCalibrator:
    """Weighted conformal calibration around a fixed censoring cutoff c0."""

    surv: ConditionalModel
    cens: ConditionalModel
    c0: float
    alpha: float
    weight_floor: float = DEFAULT_WEIGHT_FLOOR

    _scores: np.ndarray | None = field(default=None, repr=False)
    _weights: np.ndarray | None = field(default=None, repr=False)
    diagnostics: CalibrationDiagnostics | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.c0 <= 0:
            raise ValueError("c0 must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 < self.weight_floor < 0.5:
            raise ValueError("weight floor must lie in (0, 0.5)")

    def fit(self, imputed: ImputedDataset) -> "FixedCutoffCalibrator":
        diag = CalibrationDiagnostics(n_input=imputed.n)
        keep = imputed.c_hat >= self.c0
        diag.n_filtered = int(keep.sum())
        if diag.n_filtered == 0:
            diag.empty_filtered = True
            self._scores = np.empty(0)
            self._weights = np.empty(0)
        else:
            xk = imputed.x[keep]
            q = self.surv.quantile_rows(xk, self.alpha)
            self._scores = q - np.minimum(imputed.time[keep], self.c0)
            c_surv = self.cens.survival_rows(xk, self.c0)
            diag.weight_floor_hits = int((c_surv < self.weight_floor).sum())
            self._weights = 1.0 / np.clip(c_surv, self.weight_floor, 1.0)
        self.diagnostics = diag
        return self

    def _require_fit(self):
        if self._scores is None:
            raise RuntimeError("calibrator not fitted; call fit() first")

    def lpb(self, x_test) -> float:
        """Preliminary bound L' = (q_alpha(x) - eta(x)) ^ c0; 0 when eta = inf."""
        self._require_fit()
        diag = self.diagnostics
        if diag.empty_filtered:
            return 0.0
        c_surv = float(self.cens.survival(x_test, self.c0))
        if c_surv < self.weight_floor:
            diag.weight_floor_hits += 1
        w_test = 1.0 / min(max(c_surv, self.weight_floor), 1.0)
        masses, p_inf = normalized_weights(self._weights, w_test)
        dist = DiscreteDistribution(
            np.concatenate([self._scores, [np.inf]]),
            np.concatenate([masses, [p_inf]]),
        )
        eta = weighted_quantile(dist, 1.0 - self.alpha)
        diag.selected = eta
        diag.p_inf = p_inf
        if math.isinf(eta):
            diag.infinite_eta += 1
            return 0.0
        q_test = float(self.surv.quantile(x_test, self.alpha))
        return min(q_test - eta, self.c0)

    def lpb_batch(self, X_test) -> np.ndarray:
        X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
        return np.array([self.lpb(X_test[i]) for i in range(X_test.shape[0])])


def fixed_cutoff_lpb(imputed: ImputedDataset, cal: FixedCutoffCalibrator, x_test) -> float:
    """One-shot fixed-cutoff preliminary bound for a single test point."""
    return cal.fit(imputed).lpb(x_test)


# ---------------------------------------------------------------------------
# Adaptive cutoff
# ---------------------------------------------------------------------------

@dataclass
class AdaptiveCalibrator:
    """Covariate-dependent cutoff calibration over a candidate bound family."""

    surv: ConditionalModel
    cens: ConditionalModel
    alpha: float
    family: str = "quantile"  # "quantile" | "shift"
    weight_floor: float = DEFAULT_WEIGHT_FLOOR

    a_hat: float | None = field(default=None, repr=False)
    _fitted_family: CandidateFamily | None = field(default=None, repr=False)
    diagnostics: CalibrationDiagnostics | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 < self.weight_floor < 0.5:
            raise ValueError("weight floor must lie in (0, 0.5)")
        if self.family not in ("quantile", "shift"):
            raise ValueError(f"unknown candidate family {self.family!r}")

    def make_family(self, imputed: ImputedDataset) -> CandidateFamily:
        if self.family == "quantile":
            return QuantileLevelFamily(self.surv)
        q = self.surv.quantile_rows(imputed.x, self.alpha)
        scale = max(float(np.max(q)), 1e-12)
        return ShiftFamily(self.surv, self.alpha, scale)

    def fit(self, imputed: ImputedDataset) -> "AdaptiveCalibrator":
        fam = self.make_family(imputed)
        grid = breakpoint_grid(imputed, self, fam=fam)
        alpha_curve, floor_hits = _miscoverage_curve(
            imputed, fam, self.cens, self.weight_floor, grid
        )
        run_sup = np.maximum.accumulate(alpha_curve)
        ok = run_sup <= self.alpha
        a_hat = float(grid[ok].max()) if ok.any() else 0.0
        self.a_hat = a_hat
        self._fitted_family = fam
        self.diagnostics = CalibrationDiagnostics(
            n_input=imputed.n,
            selected=a_hat,
            weight_floor_hits=floor_hits,
            grid_size=int(grid.size),
        )
        self._grid = grid
        self._alpha_curve = alpha_curve
        return self

    def _require_fit(self):
        if self.a_hat is None:
            raise RuntimeError("calibrator not fitted; call fit() first")

    def lpb(self, x_test) -> float:
        """Preliminary bound: the selected candidate evaluated at x_test."""
        self._require_fit()
        return float(self._fitted_family.value(x_test, self.a_hat))

    def lpb_batch(self, X_test) -> np.ndarray:
        self._require_fit()
        X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
        return np.asarray(
            self._fitted_family.values_rows(X_test, self.a_hat), dtype=float
        )


def breakpoint_grid(imputed: ImputedDataset, cal: AdaptiveCalibrator,
                    fam: CandidateFamily | None = None) -> np.ndarray:
    """All candidate indices where a miscoverage indicator can flip.

    For each record, the sweep indicators change exactly where the candidate
    crosses t_tilde or the imputed censoring time; both crossings are found
    by bisection in the index, and 0 is always included.
    """
    fam = cal.make_family(imputed) if fam is None else fam
    a_bar = fam.sup_indices(imputed.x, imputed.time)
    event = imputed.event
    a_tilde = a_bar.copy()
    if event.any():
        a_tilde[event] = fam.sup_indices(imputed.x[event], imputed.c_hat[event])
    return np.unique(np.concatenate([a_bar, a_tilde, [0.0]]))


def _miscoverage_curve(imputed, fam, cens, weight_floor, grid):
    """Estimated miscoverage at every grid index (vectorized per record)."""
    num = np.zeros(grid.size)
    den = np.zeros(grid.size)
    floor_hits = 0
    for i in range(imputed.n):
        f_vals = np.asarray(fam.value(imputed.x[i], grid), dtype=float)
        c_surv = cens.survival(imputed.x[i], np.where(np.isfinite(f_vals), f_vals, 0.0))
        c_surv = np.where(np.isfinite(f_vals), c_surv, 0.0)
        floor_hits += int((c_surv < weight_floor).sum())
        w = 1.0 / np.clip(c_surv, weight_floor, 1.0)
        eligible = f_vals <= imputed.c_hat[i]
        violated = eligible & (imputed.time[i] < f_vals)
        num += w * violated
        den += w * eligible
    with np.errstate(invalid="ignore"):
        curve = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return curve, floor_hits


def miscoverage_hat(a: float, imputed: ImputedDataset, cal: AdaptiveCalibrator,
                    fam: CandidateFamily | None = None) -> float:
    """Weighted miscoverage estimate for one candidate index.

    Empty denominator (no record can ever reveal a violation at this index)
    counts as certain miscoverage, excluding the candidate.
    """
    fam = cal.make_family(imputed) if fam is None else fam
    curve, _ = _miscoverage_curve(imputed, fam, cal.cens, cal.weight_floor,
                                  np.asarray([a], dtype=float))
    return float(curve[0])


def adaptive_lpb(imputed: ImputedDataset, cal: AdaptiveCalibrator, x_test) -> float:
    """One-shot adaptive preliminary bound for a single test point."""
    return cal.fit(imputed).lpb(x_test)


def dr_adjust(preliminary: float, q_alpha_uncalibrated: float) -> float:
    """Final robustness step: never exceed the raw model quantile."""
    if not (math.isfinite(preliminary) and math.isfinite(q_alpha_uncalibrated)):
        raise ValueError("dr_adjust requires finite inputs")
    if preliminary < 0 or q_alpha_uncalibrated < 0:
        raise ValueError("dr_adjust requires nonnegative inputs")
    return min(preliminary, q_alpha_uncalibrated)


# ---------------------------------------------------------------------------
# End-to-end batch entry points (impute -> calibrate -> adjust)
# ---------------------------------------------------------------------------

def _finish(prelim: np.ndarray, q_test: np.ndarray):
    adjusted = np.minimum(prelim, q_test)
    lpbs = np.maximum(adjusted, 0.0)
    dr_active = float(np.mean(prelim > q_test)) if prelim.size else 0.0
    return lpbs, dr_active


def drcosarc_fixed_batch(imputed: ImputedDataset, surv: ConditionalModel,
                         cens: ConditionalModel, alpha: float, c0: float,
                         X_test, weight_floor: float = DEFAULT_WEIGHT_FLOOR):
    """Fixed-cutoff bounds for a test matrix; returns (lpbs, info)."""
    cal = FixedCutoffCalibrator(surv, cens, c0=c0, alpha=alpha,
                                weight_floor=weight_floor).fit(imputed)
    prelim = cal.lpb_batch(X_test)
    q_test = np.asarray(surv.quantile_rows(X_test, alpha), dtype=float)
    lpbs, dr_active = _finish(prelim, q_test)
    return lpbs, {"diagnostics": cal.diagnostics, "dr_active_frac": dr_active, "c0": c0}


def drcosarc_adaptive_batch(imputed: ImputedDataset, surv: ConditionalModel,
                            cens: ConditionalModel, alpha: float, X_test,
                            family: str = "quantile",
                            weight_floor: float = DEFAULT_WEIGHT_FLOOR):
    """Adaptive-cutoff bounds for a test matrix; returns (lpbs, info)."""
    cal = AdaptiveCalibrator(surv, cens, alpha=alpha, family=family,
                             weight_floor=weight_floor).fit(imputed)
    prelim = cal.lpb_batch(X_test)
    q_test = np.asarray(surv.quantile_rows(X_test, alpha), dtype=float)
    lpbs, dr_active = _finish(prelim, q_test)
    return lpbs, {"diagnostics": cal.diagnostics, "dr_active_frac": dr_active,
                  "a_hat": cal.a_hat}
