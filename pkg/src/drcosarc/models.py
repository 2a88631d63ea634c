"""Conditional survival/censoring models fitted from right-censored data.

Every fitted model answers three queries for a covariate vector ``x``:

* ``survival(x, t)``   — P(Y > t | X = x) under the fitted law,
* ``density(x, t)``    — a proper density with infinite support,
* ``quantile(x, a)``   — generalized inverse of the fitted CDF.

Censoring models are fitted by flipping the event indicator, so exactly the
same estimators serve both targets.  Step-curve families (Kaplan-Meier and
its nearest-neighbor conditional variant) expose their native step survival
function, while density and inverse-CDF queries go through a monotone
piecewise-linear interpolation of the CDF with an exponential tail carrying
the mass left beyond the last knot.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.special import erfcx, log_ndtr, ndtr, ndtri

__all__ = [
    "KMCurve",
    "ConditionalModel",
    "KaplanMeierModel",
    "LognormalAFTModel",
    "CoxPHModel",
    "KnnKMModel",
    "FitConvergenceError",
    "fit_kaplan_meier",
    "fit_lognormal_aft",
    "fit_cox",
    "fit_knn_km",
    "fit_model",
    "censored_lognormal_loglik",
    "censored_lognormal_grad",
    "cox_partial_loglik",
    "cox_partial_grad",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
    "default_knn_k",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class FitConvergenceError(RuntimeError):
    """Optimizer failed to converge; carries the last iterate."""

    def __init__(self, message, last_params=None):
        super().__init__(message)
        self.last_params = last_params


# ---------------------------------------------------------------------------
# Kaplan-Meier curves and the piecewise-linear CDF smoothing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KMCurve:
    """Product-limit curve: distinct ascending times and S(t) just after each."""

    times: np.ndarray
    surv: np.ndarray

    def __post_init__(self):
        if self.times.size != self.surv.size or self.times.size == 0:
            raise ValueError("times and surv must be nonempty and matched")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly ascending")
        if np.any(np.diff(self.surv) > 1e-15) or np.any(self.surv < 0) or np.any(self.surv > 1):
            raise ValueError("surv must be nonincreasing within [0, 1]")

    def survival_at(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        s = np.where(idx == 0, 1.0, self.surv[np.maximum(idx - 1, 0)])
        return s if s.ndim else float(s)


def fit_kaplan_meier(times, events=None) -> KMCurve:
    """Product-limit estimate from observed times and event indicators.

    Accepts either a Dataset-like object (with .time/.event) or two arrays.
    """
    if events is None:
        times, events = times.time, times.event
    t = np.asarray(times, dtype=float).ravel()
    e = np.asarray(events).astype(bool).ravel()
    if t.size == 0:
        raise ValueError("cannot fit Kaplan-Meier on empty data")
    order = np.argsort(t, kind="stable")
    t, e = t[order], e[order]
    distinct, start = np.unique(t, return_index=True)
    n = t.size
    # deaths per distinct time and risk-set sizes (counts with time >= value)
    deaths = np.add.reduceat(e.astype(float), start)
    at_risk = n - start
    factors = 1.0 - deaths / at_risk
    surv = np.clip(np.cumprod(factors), 0.0, 1.0)
    return KMCurve(distinct, surv)


class _SmoothedStepCDF:
    """Monotone interpolation of a step CDF: linear between mass knots,
    exponential tail beyond the last one, matching the leftover mass.

    The tail rate is set so the tail mean equals the last inter-knot
    spacing (or the last knot's position when there is a single knot).
    """

    def __init__(self, curve: KMCurve):
        cdf = 1.0 - curve.surv
        keep = np.concatenate(([cdf[0] > 0], np.diff(cdf) > 0))
        ts = np.concatenate(([0.0], curve.times[keep]))
        fs = np.concatenate(([0.0], cdf[keep]))
        self.knot_t = ts
        self.knot_f = fs
        self.tail_mass = float(1.0 - fs[-1])
        if ts.size >= 2:
            self.tau = float(ts[-1] - ts[-2]) if ts.size > 2 else float(ts[-1])
        else:
            # no mass knots at all (everything censored): spread the tail
            # over the scale of the largest observed time
            self.tau = float(curve.times[-1])
        self.t_last = float(ts[-1])

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        inner = np.interp(t, self.knot_t, self.knot_f)
        if self.tail_mass > 0:
            tail = 1.0 - self.tail_mass * np.exp(-(np.maximum(t - self.t_last, 0.0)) / self.tau)
            out = np.where(t <= self.t_last, inner, tail)
        else:
            out = inner
        out = np.clip(out, 0.0, 1.0)
        return out if out.ndim else float(out)

    def density(self, t):
        t = np.asarray(t, dtype=float)
        slopes = np.diff(self.knot_f) / np.diff(self.knot_t) if self.knot_t.size > 1 else np.empty(0)
        idx = np.searchsorted(self.knot_t, t, side="left")
        inner = np.zeros_like(t, dtype=float)
        valid = (idx >= 1) & (idx <= slopes.size)
        if slopes.size:
            inner[valid] = slopes[idx[valid] - 1]
        if self.tail_mass > 0:
            tail = (self.tail_mass / self.tau) * np.exp(-(t - self.t_last) / self.tau)
            out = np.where(t > self.t_last, tail, inner)
        else:
            out = np.where(t > self.t_last, 0.0, inner)
        out = np.where(t <= 0, 0.0, out)
        return out if out.ndim else float(out)

    def icdf(self, q):
        q = np.asarray(q, dtype=float)
        inner = np.interp(q, self.knot_f, self.knot_t)
        if self.tail_mass > 0:
            with np.errstate(divide="ignore"):
                tail = self.t_last + self.tau * np.log(self.tail_mass / np.maximum(1.0 - q, 0.0))
            out = np.where(q <= self.knot_f[-1], inner, tail)
        else:
            out = np.where(q >= 1.0, self.knot_t[-1], inner)
        return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Conditional model interface
# ---------------------------------------------------------------------------

class ConditionalModel:
    """Base class for conditional time-to-event models.

    ``target`` records whether the model estimates the survival-time law or
    the censoring law; ``mask`` restricts all fitting and queries to the
    first ``mask`` covariates.  Instances are immutable after fitting apart
    from the ``diagnostics`` counter.
    """

    family = "base"

    def __init__(self, target="survival", mask=None):
        if target not in ("survival", "censoring"):
            raise ValueError(f"unknown target {target!r}")
        if mask is not None and mask < 1:
            raise ValueError("mask must be a positive covariate count")
        self.target = target
        self.mask = mask
        self.diagnostics = Counter()

    # -- covariate handling -------------------------------------------------
    def _xs(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        return x[: self.mask] if self.mask is not None else x

    # -- native queries ------------------------------------------------------
    def survival(self, x, t):
        """P(Y > t | X=x); right-continuous in t, equals 1 at t = 0."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0):
            raise ValueError("time must be nonnegative")
        out = np.clip(self._survival(self._xs(x), t_arr), 0.0, 1.0)
        return out if np.ndim(t) else float(out)

    def density(self, x, t):
        """Density of the smoothly interpolated fitted law at t > 0."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr <= 0):
            raise ValueError("density requires t > 0")
        out = self._density(self._xs(x), t_arr)
        return out if np.ndim(t) else float(out)

    def quantile(self, x, level):
        """Smallest t with F(t | x) >= level.

        Levels 0 and 1 map to the support edges; step-curve families that
        plateau below the level return the largest observed time and count a
        "plateau" diagnostic.
        """
        lv = np.asarray(level, dtype=float)
        if np.any(lv < 0) or np.any(lv > 1):
            raise ValueError("quantile level must lie in [0, 1]")
        out = self._quantile(self._xs(x), lv)
        return out if np.ndim(level) else float(out)

    # -- smooth CDF used by the imputation sampler ---------------------------
    def cdf_smooth(self, x, t):
        t_arr = np.asarray(t, dtype=float)
        out = self._cdf_smooth(self._xs(x), t_arr)
        return out if np.ndim(t) else float(out)

    def tail_smooth(self, x, t):
        """Upper-tail mass of the smooth law beyond t (the imputation normalizer)."""
        t_arr = np.asarray(t, dtype=float)
        out = 1.0 - self._cdf_smooth(self._xs(x), t_arr)
        return out if np.ndim(t) else float(out)

    def icdf_smooth(self, x, q):
        q_arr = np.asarray(q, dtype=float)
        out = self._icdf_smooth(self._xs(x), q_arr)
        return out if np.ndim(q) else float(out)

    # -- batch helpers (overridden where a closed form vectorizes) -----------
    def survival_rows(self, X, t):
        """survival(x_i, t_i) for paired rows/times (t may be scalar)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (X.shape[0],))
        return np.array([self.survival(X[i], float(t[i])) for i in range(X.shape[0])])

    def quantile_rows(self, X, level):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lv = np.broadcast_to(np.asarray(level, dtype=float), (X.shape[0],))
        return np.array([self.quantile(X[i], float(lv[i])) for i in range(X.shape[0])])

    # -- hooks ---------------------------------------------------------------
    def _survival(self, xs, t):  # pragma: no cover - abstract
        raise NotImplementedError

    def _density(self, xs, t):  # pragma: no cover - abstract
        raise NotImplementedError

    def _quantile(self, xs, level):  # pragma: no cover - abstract
        raise NotImplementedError

    def _cdf_smooth(self, xs, t):
        # continuous families: the native CDF is already smooth
        return 1.0 - np.clip(self._survival(xs, t), 0.0, 1.0)

    def _icdf_smooth(self, xs, q):
        return self._quantile(xs, np.clip(q, 0.0, 1.0))

    def describe(self) -> str:
        return f"{self.family}/{self.target}"


class _StepCurveMixin:
    """Shared step-curve query logic; subclasses provide _curve(xs)."""

    def _survival(self, xs, t):
        return self._curve(xs).survival_at(t)

    def _density(self, xs, t):
        return self._smooth(xs).density(t)

    def _cdf_smooth(self, xs, t):
        return self._smooth(xs).cdf(t)

    def _icdf_smooth(self, xs, q):
        return self._smooth(xs).icdf(q)

    def _quantile(self, xs, level):
        curve = self._curve(xs)
        cdf = 1.0 - curve.surv
        lv = np.asarray(level, dtype=float)
        scalar = lv.ndim == 0
        lv = np.atleast_1d(lv)
        idx = np.searchsorted(cdf, np.minimum(lv, 1.0), side="left")
        plateau = idx >= cdf.size
        if np.any(plateau):
            self.diagnostics["plateau"] += int(plateau.sum())
        out = np.where(plateau, curve.times[-1], curve.times[np.minimum(idx, cdf.size - 1)])
        out = np.where(lv <= 0.0, 0.0, out)
        return float(out[0]) if scalar else out


class KaplanMeierModel(_StepCurveMixin, ConditionalModel):
    """Covariate-free product-limit model."""

    family = "km"

    def __init__(self, curve: KMCurve, target="survival", mask=None):
        super().__init__(target=target, mask=mask)
        self.curve = curve
        self._smoothed = _SmoothedStepCDF(curve)

    def _curve(self, xs):
        return self.curve

    def _smooth(self, xs):
        return self._smoothed


class LognormalAFTModel(ConditionalModel):
    """Accelerated failure time model: log Y | X=x ~ N(intercept + beta.x, sigma^2)."""

    family = "aft"

    def __init__(self, intercept, beta, sigma, target="survival", mask=None):
        super().__init__(target=target, mask=mask)
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.intercept = float(intercept)
        self.beta = np.asarray(beta, dtype=float).ravel()
        self.sigma = float(sigma)

    def _mu(self, xs) -> float:
        if xs.shape[0] != self.beta.shape[0]:
            raise ValueError(
                f"covariate dimension mismatch: got {xs.shape[0]}, expected {self.beta.shape[0]}"
            )
        return float(self.intercept + xs @ self.beta)

    def _survival(self, xs, t):
        mu = self._mu(xs)
        t = np.asarray(t, dtype=float)
        out = np.ones_like(t, dtype=float)
        pos = t > 0
        z = (np.log(t[pos]) - mu) / self.sigma
        out[pos] = ndtr(-z)
        return out

    def _density(self, xs, t):
        mu = self._mu(xs)
        z = (np.log(t) - mu) / self.sigma
        return np.exp(-0.5 * z * z - _LOG_SQRT_2PI) / (self.sigma * t)

    def _quantile(self, xs, level):
        mu = self._mu(xs)
        lv = np.asarray(level, dtype=float)
        with np.errstate(over="ignore"):
            out = np.exp(mu + self.sigma * ndtri(np.clip(lv, 0.0, 1.0)))
        return np.where(lv <= 0.0, 0.0, out)

    # vectorized batch forms
    def _mu_rows(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Xs = X[:, : self.mask] if self.mask is not None else X
        return self.intercept + Xs @ self.beta

    def survival_rows(self, X, t):
        mu = self._mu_rows(X)
        t = np.broadcast_to(np.asarray(t, dtype=float), mu.shape)
        out = np.ones_like(mu)
        pos = t > 0
        out[pos] = ndtr(-(np.log(t[pos]) - mu[pos]) / self.sigma)
        return out

    def quantile_rows(self, X, level):
        mu = self._mu_rows(X)
        lv = np.broadcast_to(np.asarray(level, dtype=float), mu.shape)
        with np.errstate(over="ignore"):
            out = np.exp(mu + self.sigma * ndtri(np.clip(lv, 0.0, 1.0)))
        return np.where(lv <= 0.0, 0.0, out)


class CoxPHModel(ConditionalModel):
    """Proportional hazards model with a piecewise-linear baseline cumulative hazard.

    The Breslow estimator yields knots (t_k, H_k); between knots the
    cumulative hazard is interpolated linearly (so the law has a density),
    and beyond the last knot it keeps growing at the last positive slope,
    which makes the fitted distribution proper.
    """

    family = "cox"

    def __init__(self, beta, baseline_times, baseline_cumhaz, center=None,
                 target="survival", mask=None):
        super().__init__(target=target, mask=mask)
        self.beta = np.asarray(beta, dtype=float).ravel()
        self.center = (
            np.zeros_like(self.beta) if center is None else np.asarray(center, dtype=float).ravel()
        )
        times = np.asarray(baseline_times, dtype=float).ravel()
        cumhaz = np.asarray(baseline_cumhaz, dtype=float).ravel()
        if times.size == 0:
            raise ValueError("baseline must contain at least one knot")
        if np.any(np.diff(times) <= 0) or times[0] <= 0:
            raise ValueError("baseline times must be positive and strictly ascending")
        if np.any(cumhaz < 0) or np.any(np.diff(cumhaz) < 0):
            raise ValueError("baseline cumulative hazard must be nonnegative and nondecreasing")
        self.baseline_times = np.concatenate(([0.0], times))
        self.baseline_cumhaz = np.concatenate(([0.0], cumhaz))
        slopes = np.diff(self.baseline_cumhaz) / np.diff(self.baseline_times)
        pos = slopes[slopes > 0]
        self._ext_slope = float(pos[-1]) if pos.size else 1.0 / float(times[-1])
        self._slopes = slopes

    def _eta(self, xs) -> float:
        if xs.shape[0] != self.beta.shape[0]:
            raise ValueError("covariate dimension mismatch")
        return float((xs - self.center) @ self.beta)

    def _H0(self, t):
        t = np.asarray(t, dtype=float)
        inner = np.interp(t, self.baseline_times, self.baseline_cumhaz)
        last_t = self.baseline_times[-1]
        last_h = self.baseline_cumhaz[-1]
        return np.where(t > last_t, last_h + self._ext_slope * (t - last_t), inner)

    def _h0(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.baseline_times, t, side="left")
        out = np.empty_like(t, dtype=float)
        inner = (idx >= 1) & (idx < self.baseline_times.size)
        out[inner] = self._slopes[idx[inner] - 1]
        out[idx == 0] = 0.0
        out[idx >= self.baseline_times.size] = self._ext_slope
        return out

    def _survival(self, xs, t):
        risk = math.exp(self._eta(xs))
        return np.exp(-self._H0(t) * risk)

    def _density(self, xs, t):
        risk = math.exp(self._eta(xs))
        return self._h0(t) * risk * np.exp(-self._H0(t) * risk)

    def _quantile(self, xs, level):
        risk = math.exp(self._eta(xs))
        lv = np.asarray(level, dtype=float)
        with np.errstate(divide="ignore"):
            h_target = -np.log1p(-np.clip(lv, 0.0, 1.0)) / risk
        # invert the piecewise-linear H0 (generalized inverse: first time)
        hk = self.baseline_cumhaz
        tk = self.baseline_times
        keep = np.concatenate(([True], np.diff(hk) > 0))
        inner = np.interp(h_target, hk[keep], tk[keep])
        beyond = h_target > hk[-1]
        out = np.where(beyond, tk[-1] + (h_target - hk[-1]) / self._ext_slope, inner)
        out = np.where(lv <= 0.0, 0.0, out)
        return np.where(lv >= 1.0, np.inf, out)


def default_knn_k(n: int) -> int:
    return min(n, max(25, math.ceil(n / 10)))


class KnnKMModel(_StepCurveMixin, ConditionalModel):
    """Nearest-neighbor conditional Kaplan-Meier model.

    The survival curve at x is the product-limit estimate over the k nearest
    training records in standardized-covariate Euclidean distance; distance
    ties at the neighborhood boundary are all kept.
    """

    family = "knn-km"

    def __init__(self, x, time, event, k, means=None, scales=None,
                 target="survival", mask=None):
        super().__init__(target=target, mask=mask)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self._time = np.asarray(time, dtype=float).ravel()
        self._event = np.asarray(event).astype(bool).ravel()
        n = self._time.size
        if not 1 <= k <= n:
            raise ValueError(f"k must lie in [1, {n}], got {k}")
        self.k = int(k)
        if means is None:
            means = x.mean(axis=0)
            scales = x.std(axis=0)
            scales = np.where(scales > 0, scales, 1.0)
        self.means = np.asarray(means, dtype=float).ravel()
        self.scales = np.asarray(scales, dtype=float).ravel()
        self._xraw = x
        self._xstd = (x - self.means) / self.scales
        self._cache: dict[bytes, tuple[KMCurve, _SmoothedStepCDF]] = {}

    def neighborhood(self, x) -> np.ndarray:
        """Indices of the k nearest training rows (boundary ties included)."""
        xs = self._xs(x)
        q = (xs - self.means) / self.scales
        d2 = np.square(self._xstd - q).sum(axis=1)
        radius = np.partition(d2, self.k - 1)[self.k - 1]
        return np.flatnonzero(d2 <= radius)

    def _entry(self, xs):
        key = xs.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            idx = self.neighborhood(xs)
            curve = fit_kaplan_meier(self._time[idx], self._event[idx])
            hit = (curve, _SmoothedStepCDF(curve))
            self._cache[key] = hit
        return hit

    def _curve(self, xs):
        return self._entry(xs)[0]

    def _smooth(self, xs):
        return self._entry(xs)[1]


# ---------------------------------------------------------------------------
# Censored lognormal (AFT) maximum likelihood
# ---------------------------------------------------------------------------

def _norm_hazard(r):
    """phi(r) / (1 - Phi(r)) via the scaled complementary error function,
    which is stable for arbitrarily large r."""
    return math.sqrt(2.0 / math.pi) / erfcx(np.asarray(r, dtype=float) / math.sqrt(2.0))


def censored_lognormal_loglik(params, x, time, event) -> float:
    """Log-likelihood of (intercept, beta..., sigma) for right-censored lognormal data."""
    params = np.asarray(params, dtype=float)
    intercept, beta, sigma = params[0], params[1:-1], params[-1]
    if sigma <= 0:
        return -np.inf
    y = np.log(np.asarray(time, dtype=float))
    mu = intercept + np.atleast_2d(x) @ beta
    r = (y - mu) / sigma
    e = np.asarray(event).astype(bool)
    ll_event = -np.log(sigma) - 0.5 * r[e] ** 2 - _LOG_SQRT_2PI - y[e]
    ll_cens = log_ndtr(-r[~e])
    return float(ll_event.sum() + ll_cens.sum())


def censored_lognormal_grad(params, x, time, event) -> np.ndarray:
    """Analytic gradient of :func:`censored_lognormal_loglik`."""
    params = np.asarray(params, dtype=float)
    intercept, beta, sigma = params[0], params[1:-1], params[-1]
    X = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.log(np.asarray(time, dtype=float))
    e = np.asarray(event).astype(bool)
    r = (y - (intercept + X @ beta)) / sigma
    lam = _norm_hazard(r)
    dmu = np.where(e, r, lam) / sigma
    dsigma = np.where(e, r * r - 1.0, r * lam) / sigma
    design = np.hstack([np.ones((X.shape[0], 1)), X])
    return np.concatenate([design.T @ dmu, [dsigma.sum()]])


def fit_lognormal_aft(data, target="survival", mask=None,
                      grad_tol=1e-8, max_iter=200) -> LognormalAFTModel:
    """Censored maximum likelihood for the lognormal AFT model.

    Damped Newton iterations in (intercept, beta, log sigma) starting from
    the least-squares fit of log t; converges when the gradient norm drops
    below ``grad_tol``.
    """
    X = data.x[:, :mask] if mask is not None else data.x
    events = data.event if target == "survival" else ~data.event
    if not events.any():
        # likelihood supremum is not attained without a single observed time
        raise ValueError("AFT fit requires at least one event for the fitted target")
    y = np.log(data.time)
    n, p = X.shape
    design = np.hstack([np.ones((n, 1)), X])
    if np.linalg.matrix_rank(design) < p + 1:
        raise ValueError("singular design")

    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    sigma0 = max(float(np.sqrt(np.mean(resid**2))), 1e-6)
    theta = np.concatenate([coef, [math.log(sigma0)]])
    e = events.astype(bool)

    def loglik_grad_hess(th):
        b, s = th[:-1], th[-1]
        sigma = math.exp(s)
        r = (y - design @ b) / sigma
        lam = _norm_hazard(r)
        lam_p = lam * (lam - r)
        ll = float(np.sum(-s - 0.5 * r[e] ** 2) + np.sum(log_ndtr(-r[~e])))
        gb_w = np.where(e, r, lam) / sigma
        gs = float(np.sum(np.where(e, r * r - 1.0, r * lam)))
        g = np.concatenate([design.T @ gb_w, [gs]])
        # Hessian blocks in (b, s); event rows use lam' = 1
        curv = np.where(e, 1.0, lam_p)
        Hbb = -(design * curv[:, None]).T @ design / sigma**2
        hbs_w = np.where(e, -2.0 * r, -(lam_p * r + lam)) / sigma
        Hbs = design.T @ hbs_w
        hss = np.where(e, -2.0 * r * r, -(r * r * lam_p + r * lam))
        H = np.zeros((th.size, th.size))
        H[:-1, :-1] = Hbb
        H[:-1, -1] = Hbs
        H[-1, :-1] = Hbs
        H[-1, -1] = float(hss.sum())
        return ll, g, H

    ll, g, H = loglik_grad_hess(theta)
    for _ in range(max_iter):
        if np.linalg.norm(g) <= grad_tol:
            break
        try:
            delta = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            delta = g
        if float(g @ delta) <= 0:
            delta = g
        step = 1.0
        improved = False
        for _ in range(60):
            cand = theta + step * delta
            cand[-1] = min(max(cand[-1], math.log(1e-10)), math.log(1e10))
            ll_new, g_new, H_new = loglik_grad_hess(cand)
            if np.isfinite(ll_new) and ll_new > ll - 1e-12:
                theta, ll, g, H = cand, ll_new, g_new, H_new
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    else:
        raise FitConvergenceError(
            f"AFT fit did not converge: |grad|={np.linalg.norm(g):.3g}",
            last_params=np.concatenate([theta[:-1], [math.exp(theta[-1])]]),
        )
    if np.linalg.norm(g) > max(grad_tol, 1e-6):
        raise FitConvergenceError(
            f"AFT fit stalled: |grad|={np.linalg.norm(g):.3g}",
            last_params=np.concatenate([theta[:-1], [math.exp(theta[-1])]]),
        )
    return LognormalAFTModel(theta[0], theta[1:-1], math.exp(theta[-1]),
                             target=target, mask=mask)


# ---------------------------------------------------------------------------
# Cox proportional hazards (Breslow ties)
# ---------------------------------------------------------------------------

def _cox_blocks(x, time):
    """Sorted view plus tie-group boundaries, largest times first."""
    order = np.argsort(-np.asarray(time, dtype=float), kind="stable")
    return order


def cox_partial_loglik(beta, x, time, event) -> float:
    """Breslow partial log-likelihood at ``beta``."""
    ll, _, __ = _cox_loglik_grad_hess(np.asarray(beta, dtype=float),
                                      np.atleast_2d(np.asarray(x, dtype=float)),
                                      np.asarray(time, dtype=float),
                                      np.asarray(event).astype(bool),
                                      want_hess=False)
    return ll


def cox_partial_grad(beta, x, time, event) -> np.ndarray:
    _, g, __ = _cox_loglik_grad_hess(np.asarray(beta, dtype=float),
                                     np.atleast_2d(np.asarray(x, dtype=float)),
                                     np.asarray(time, dtype=float),
                                     np.asarray(event).astype(bool),
                                     want_hess=False)
    return g


def _cox_loglik_grad_hess(beta, x, time, event, want_hess=True):
    n, p = x.shape
    order = _cox_blocks(x, time)
    xs, ts, es = x[order], time[order], event[order]
    scores = xs @ beta
    shift = scores.max() if n else 0.0
    w = np.exp(scores - shift)
    ll = 0.0
    g = np.zeros(p)
    H = np.zeros((p, p)) if want_hess else None
    s0 = 0.0
    s1 = np.zeros(p)
    s2 = np.zeros((p, p)) if want_hess else None
    i = 0
    while i < n:
        j = i
        while j < n and ts[j] == ts[i]:
            j += 1
        block, wb = xs[i:j], w[i:j]
        s0 += float(wb.sum())
        s1 += wb @ block
        if want_hess:
            s2 += block.T @ (block * wb[:, None])
        ev = es[i:j]
        d = int(ev.sum())
        if d > 0:
            xbar = s1 / s0
            ll += float(scores[i:j][ev].sum()) - d * (math.log(s0) + shift)
            g += block[ev].sum(axis=0) - d * xbar
            if want_hess:
                H -= d * (s2 / s0 - np.outer(xbar, xbar))
        i = j
    return ll, g, H


def fit_cox(data, target="survival", mask=None, grad_tol=1e-8,
            max_iter=200, beta_bound=50.0) -> CoxPHModel:
    """Newton-with-step-halving maximization of the Breslow partial likelihood.

    Raises when the iterates diverge (monotone likelihood / separation).
    """
    X = data.x[:, :mask] if mask is not None else data.x
    events = (data.event if target == "survival" else ~data.event).astype(bool)
    time = data.time
    if events.sum() == 0:
        raise ValueError("Cox fit requires at least one event")
    center = X.mean(axis=0)
    Xc = X - center
    p = Xc.shape[1]
    beta = np.zeros(p)
    ll, g, H = _cox_loglik_grad_hess(beta, Xc, time, events)
    for _ in range(max_iter):
        if np.linalg.norm(g) <= grad_tol:
            break
        try:
            delta = np.linalg.solve(-(H - 1e-12 * np.eye(p)), g)
        except np.linalg.LinAlgError:
            delta = g
        if float(g @ delta) <= 0:
            delta = g
        step = 1.0
        improved = False
        for _ in range(60):
            cand = beta + step * delta
            ll_new, g_new, H_new = _cox_loglik_grad_hess(cand, Xc, time, events)
            if np.isfinite(ll_new) and ll_new > ll - 1e-12:
                beta, ll, g, H = cand, ll_new, g_new, H_new
                improved = True
                break
            step *= 0.5
        if np.linalg.norm(beta) > beta_bound:
            raise FitConvergenceError(
                "monotone partial likelihood (separation): |beta| diverged",
                last_params=beta,
            )
        if not improved:
            break
    if np.linalg.norm(g) > max(grad_tol, 1e-6):
        raise FitConvergenceError(
            f"Cox fit stalled: |grad|={np.linalg.norm(g):.3g}", last_params=beta
        )

    # Breslow baseline cumulative hazard on centered scores
    order = np.argsort(time, kind="stable")
    ts, es = time[order], events[order]
    w = np.exp(Xc[order] @ beta)
    distinct, start = np.unique(ts, return_index=True)
    deaths = np.add.reduceat(es.astype(float), start)
    # risk sums: total weight with time >= each distinct value
    suffix = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])
    risk = suffix[start]
    mask_d = deaths > 0
    increments = deaths[mask_d] / risk[mask_d]
    htimes = distinct[mask_d]
    cumhaz = np.cumsum(increments)
    return CoxPHModel(beta, htimes, cumhaz, center=center, target=target, mask=mask)


def fit_knn_km(data, k=None, target="survival", mask=None) -> KnnKMModel:
    """Nearest-neighbor conditional Kaplan-Meier fit."""
    X = data.x[:, :mask] if mask is not None else data.x
    events = data.event if target == "survival" else ~data.event
    if k is None:
        k = default_knn_k(data.n)
    return KnnKMModel(X, data.time, events, k=k, target=target, mask=mask)


def fit_model(data, family, target="survival", mask=None, **options) -> ConditionalModel:
    """Fit one of the supported families; censoring models flip the indicator."""
    if family == "km":
        events = data.event if target == "survival" else ~data.event
        curve = fit_kaplan_meier(data.time, events)
        return KaplanMeierModel(curve, target=target, mask=mask)
    if family == "aft":
        return fit_lognormal_aft(data, target=target, mask=mask, **options)
    if family == "cox":
        return fit_cox(data, target=target, mask=mask, **options)
    if family == "knn-km":
        return fit_knn_km(data, target=target, mask=mask, **options)
    raise ValueError(f"unknown model family {family!r}")


# ---------------------------------------------------------------------------
# Serialization (versioned JSON documents)
# ---------------------------------------------------------------------------

_FORMAT_VERSION = 1


def model_to_dict(model: ConditionalModel) -> dict:
    doc = {
        "format_version": _FORMAT_VERSION,
        "family": model.family,
        "target": model.target,
        "mask": model.mask,
    }
    if isinstance(model, KaplanMeierModel):
        doc["times"] = model.curve.times.tolist()
        doc["surv"] = model.curve.surv.tolist()
    elif isinstance(model, LognormalAFTModel):
        doc["intercept"] = model.intercept
        doc["beta"] = model.beta.tolist()
        doc["sigma"] = model.sigma
    elif isinstance(model, CoxPHModel):
        doc["beta"] = model.beta.tolist()
        doc["center"] = model.center.tolist()
        doc["baseline_times"] = model.baseline_times[1:].tolist()
        doc["baseline_cumhaz"] = model.baseline_cumhaz[1:].tolist()
    elif isinstance(model, KnnKMModel):
        doc["k"] = model.k
        doc["means"] = model.means.tolist()
        doc["scales"] = model.scales.tolist()
        doc["x"] = model._xraw.tolist()
        doc["time"] = model._time.tolist()
        doc["event"] = model._event.astype(int).tolist()
    else:
        raise ValueError(f"cannot serialize model family {model.family!r}")
    return doc


def model_from_dict(doc: dict) -> ConditionalModel:
    if doc.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('format_version')}")
    family = doc["family"]
    target, mask = doc["target"], doc.get("mask")
    if family == "km":
        curve = KMCurve(np.asarray(doc["times"], float), np.asarray(doc["surv"], float))
        return KaplanMeierModel(curve, target=target, mask=mask)
    if family == "aft":
        return LognormalAFTModel(doc["intercept"], doc["beta"], doc["sigma"],
                                 target=target, mask=mask)
    if family == "cox":
        return CoxPHModel(doc["beta"], doc["baseline_times"], doc["baseline_cumhaz"],
                          center=doc.get("center"), target=target, mask=mask)
    if family == "knn-km":
        return KnnKMModel(doc["x"], doc["time"], doc["event"], k=doc["k"],
                          means=doc["means"], scales=doc["scales"],
                          target=target, mask=mask)
    raise ValueError(f"unknown model family {family!r}")


def save_model(model: ConditionalModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> ConditionalModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
