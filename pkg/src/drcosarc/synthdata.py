"""Synthetic data-generating distributions and their closed-form oracles.

Ten benchmark settings, each drawing covariates from a uniform box,
survival times from a conditional lognormal law, and censoring times from
either a conditional lognormal or a conditional exponential law, with
T and C independent given X.  The registry is declarative so every formula
appears exactly once; everything else (sampling, oracle quantiles, analytic
models) is derived from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr, ndtri

from .core import Dataset, LatentSample
from .models import ConditionalModel
from .streams import RandomStream

__all__ = [
    "SettingSpec",
    "get_setting",
    "SETTING_IDS",
    "generate_latent",
    "apply_right_censoring",
    "oracle_quantile",
    "true_censoring_model",
    "true_survival_model",
    "AnalyticLognormalModel",
    "AnalyticExponentialModel",
]


@dataclass(frozen=True)
class SettingSpec:
    """One synthetic data-generating distribution.

    ``mu_s``/``sigma_s`` parameterize the conditional lognormal survival law;
    the censoring law is lognormal (``mu_c``/``sigma_c``) or exponential
    (``rate_c``).  All callables map an (n, p) covariate matrix to (n,).
    """

    id: int
    p: int
    x_low: float
    x_high: float
    mu_s: Callable[[np.ndarray], np.ndarray]
    sigma_s: Callable[[np.ndarray], np.ndarray]
    cens_kind: str  # "lognormal" | "exponential"
    mu_c: Callable[[np.ndarray], np.ndarray] | None = None
    sigma_c: Callable[[np.ndarray], np.ndarray] | None = None
    rate_c: Callable[[np.ndarray], np.ndarray] | None = None


def _col(x: np.ndarray, j: int) -> np.ndarray:
    """1-based column access matching the registry formulas."""
    return x[:, j - 1]


def _ind(cond: np.ndarray) -> np.ndarray:
    """0/1 indicator as float (numpy bool addition would OR, not add)."""
    return cond.astype(float)


_REGISTRY: dict[int, SettingSpec] = {
    1: SettingSpec(
        id=1, p=100, x_low=0.0, x_high=1.0,
        mu_s=lambda x: _ind(_col(x, 2) > 0.5) + _ind(_col(x, 3) < 0.5)
        + (1.0 - _col(x, 1)) ** 0.25,
        sigma_s=lambda x: (1.0 - _col(x, 1)) / 10.0,
        cens_kind="lognormal",
        mu_c=lambda x: _ind(_col(x, 2) > 0.5) + _ind(_col(x, 3) < 0.5)
        + (1.0 - _col(x, 1)) ** 4 + 0.4,
        sigma_c=lambda x: _col(x, 2) / 10.0,
    ),
    2: SettingSpec(
        id=2, p=100, x_low=0.0, x_high=1.0,
        mu_s=lambda x: _col(x, 1) ** 0.25,
        sigma_s=lambda x: np.full(x.shape[0], 0.1),
        cens_kind="lognormal",
        mu_c=lambda x: _col(x, 1) ** 4 + 0.4,
        sigma_c=lambda x: np.full(x.shape[0], 0.1),
    ),
    3: SettingSpec(
        id=3, p=100, x_low=-1.0, x_high=1.0,
        mu_s=lambda x: math.log(2.0) + 1.0 + 0.55 * (_col(x, 1) ** 2 - _col(x, 3) * _col(x, 5)),
        sigma_s=lambda x: np.abs(_col(x, 10)) + 1.0,
        cens_kind="exponential",
        rate_c=lambda x: np.full(x.shape[0], 0.4),
    ),
    4: SettingSpec(
        id=4, p=100, x_low=-1.0, x_high=1.0,
        mu_s=lambda x: math.log(2.0) + 1.0 + 0.55 * (_col(x, 1) ** 2 - _col(x, 3) * _col(x, 5)),
        sigma_s=lambda x: np.ones(x.shape[0]),
        cens_kind="exponential",
        rate_c=lambda x: np.full(x.shape[0], 0.4),
    ),
    5: SettingSpec(
        id=5, p=1, x_low=0.0, x_high=4.0,
        mu_s=lambda x: 0.632 * _col(x, 1),
        sigma_s=lambda x: np.full(x.shape[0], 2.0),
        cens_kind="exponential",
        rate_c=lambda x: np.full(x.shape[0], 0.1),
    ),
    6: SettingSpec(
        id=6, p=1, x_low=0.0, x_high=4.0,
        mu_s=lambda x: 3.0 * _ind(_col(x, 1) > 2) + _col(x, 1) * _ind(_col(x, 1) < 2),
        sigma_s=lambda x: np.full(x.shape[0], 0.5),
        cens_kind="exponential",
        rate_c=lambda x: np.full(x.shape[0], 0.1),
    ),
    7: SettingSpec(
        id=7, p=1, x_low=0.0, x_high=4.0,
        mu_s=lambda x: 2.0 * _ind(_col(x, 1) > 2) + _col(x, 1) * _ind(_col(x, 1) < 2),
        sigma_s=lambda x: np.full(x.shape[0], 0.5),
        cens_kind="exponential",
        rate_c=lambda x: 0.25 + (_col(x, 1) + 6.0) / 100.0,
    ),
    8: SettingSpec(
        id=8, p=1, x_low=0.0, x_high=4.0,
        mu_s=lambda x: 3.0 * _ind(_col(x, 1) > 2) + 1.5 * _col(x, 1) * _ind(_col(x, 1) < 2),
        sigma_s=lambda x: np.full(x.shape[0], 0.5),
        cens_kind="lognormal",
        mu_c=lambda x: 2.0 + (2.0 - _col(x, 1)) / 50.0,
        sigma_c=lambda x: np.full(x.shape[0], 0.5),
    ),
    9: SettingSpec(
        id=9, p=10, x_low=0.0, x_high=4.0,
        mu_s=lambda x: 0.126 * (_col(x, 1) + np.sqrt(_col(x, 3) * _col(x, 5))) + 1.0,
        sigma_s=lambda x: np.full(x.shape[0], 0.5),
        cens_kind="exponential",
        rate_c=lambda x: _col(x, 10) / 10.0 + 0.05,
    ),
    10: SettingSpec(
        id=10, p=10, x_low=0.0, x_high=4.0,
        mu_s=lambda x: 0.126 * (_col(x, 1) + np.sqrt(_col(x, 3) * _col(x, 5))) + 1.0,
        sigma_s=lambda x: (_col(x, 2) + 2.0) / 4.0,
        cens_kind="exponential",
        rate_c=lambda x: _col(x, 10) / 10.0 + 0.05,
    ),
}

SETTING_IDS = tuple(sorted(_REGISTRY))


def get_setting(setting_id: int) -> SettingSpec:
    try:
        return _REGISTRY[int(setting_id)]
    except (KeyError, ValueError):
        raise ValueError(f"unknown setting id {setting_id!r}; valid ids are 1..10") from None


def _lognormal_draws(mu, sigma, z):
    # sigma may vanish on the boundary of the covariate box; the law is then
    # a point mass at exp(mu)
    return np.exp(mu + sigma * z)


def generate_latent(setting: SettingSpec, n: int, stream: RandomStream) -> LatentSample:
    """Draw n i.i.d. latent records (x, t, c) with T and C independent given X.

    Covariates, survival draws, and censoring draws come from separate
    substreams, so the sequence is invariant to how many records a later
    stage consumes.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    x_stream, t_stream, c_stream = (stream.substream(i) for i in range(3))
    x = setting.x_low + (setting.x_high - setting.x_low) * x_stream.uniform((n, setting.p))
    t = _lognormal_draws(setting.mu_s(x), setting.sigma_s(x), t_stream.normal(n))
    if setting.cens_kind == "lognormal":
        c = _lognormal_draws(setting.mu_c(x), setting.sigma_c(x), c_stream.normal(n))
    else:
        c = c_stream.exponential(rate=setting.rate_c(x), size=n)
    return LatentSample(x=x, t=t, c=c)


def apply_right_censoring(latent: LatentSample) -> Dataset:
    """Observed view: t_tilde = min(t, c), event = (t < c)."""
    t_tilde = np.minimum(latent.t, latent.c)
    event = latent.t < latent.c
    return Dataset(latent.x, t_tilde, event)


def oracle_quantile(setting: SettingSpec, x, level: float):
    """True conditional quantile of the survival law: exp(mu + sigma * z_level)."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        if x.size != setting.p:
            raise ValueError(f"expected {setting.p} covariates, got {x.size}")
        x = x.reshape(1, -1)
    z = ndtri(level)
    out = np.exp(setting.mu_s(x) + setting.sigma_s(x) * z)
    return float(out[0]) if single else out


class AnalyticLognormalModel(ConditionalModel):
    """Exact conditional lognormal law given by mean/scale functions of x."""

    family = "analytic-lognormal"

    def __init__(self, mu_fn, sigma_fn, target="survival"):
        super().__init__(target=target, mask=None)
        self._mu_fn = mu_fn
        self._sigma_fn = sigma_fn

    def _params(self, xs):
        row = xs.reshape(1, -1)
        return float(self._mu_fn(row)[0]), float(self._sigma_fn(row)[0])

    def _survival(self, xs, t):
        mu, sigma = self._params(xs)
        t = np.asarray(t, dtype=float)
        if sigma == 0.0:
            return (t < math.exp(mu)).astype(float)
        out = np.ones_like(t, dtype=float)
        pos = t > 0
        out[pos] = ndtr(-(np.log(t[pos]) - mu) / sigma)
        return out

    def _density(self, xs, t):
        mu, sigma = self._params(xs)
        t = np.asarray(t, dtype=float)
        if sigma == 0.0:
            return np.zeros_like(t, dtype=float)
        z = (np.log(t) - mu) / sigma
        return np.exp(-0.5 * z * z) / (sigma * t * math.sqrt(2.0 * math.pi))

    def _quantile(self, xs, level):
        mu, sigma = self._params(xs)
        lv = np.asarray(level, dtype=float)
        if sigma == 0.0:
            out = np.full_like(lv, math.exp(mu), dtype=float)
        else:
            with np.errstate(over="ignore"):
                out = np.exp(mu + sigma * ndtri(np.clip(lv, 0.0, 1.0)))
        return np.where(lv <= 0.0, 0.0, out)

    def survival_rows(self, X, t):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mu = self._mu_fn(X)
        sigma = self._sigma_fn(X)
        t = np.broadcast_to(np.asarray(t, dtype=float), mu.shape)
        out = np.ones_like(mu)
        pos = (t > 0) & (sigma > 0)
        out[pos] = ndtr(-(np.log(t[pos]) - mu[pos]) / sigma[pos])
        degenerate = (sigma == 0)
        out[degenerate] = (t[degenerate] < np.exp(mu[degenerate])).astype(float)
        return out

    def quantile_rows(self, X, level):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mu = self._mu_fn(X)
        sigma = self._sigma_fn(X)
        lv = np.broadcast_to(np.asarray(level, dtype=float), mu.shape)
        with np.errstate(over="ignore"):
            out = np.exp(mu + sigma * ndtri(np.clip(lv, 0.0, 1.0)))
        out = np.where(sigma == 0, np.exp(mu), out)
        return np.where(lv <= 0.0, 0.0, out)


class AnalyticExponentialModel(ConditionalModel):
    """Exact conditional exponential law with rate function of x."""

    family = "analytic-exponential"

    def __init__(self, rate_fn, target="censoring"):
        super().__init__(target=target, mask=None)
        self._rate_fn = rate_fn

    def _rate(self, xs) -> float:
        return float(self._rate_fn(xs.reshape(1, -1))[0])

    def _survival(self, xs, t):
        lam = self._rate(xs)
        return np.exp(-lam * np.asarray(t, dtype=float))

    def _density(self, xs, t):
        lam = self._rate(xs)
        return lam * np.exp(-lam * np.asarray(t, dtype=float))

    def _quantile(self, xs, level):
        lam = self._rate(xs)
        lv = np.asarray(level, dtype=float)
        with np.errstate(divide="ignore"):
            out = -np.log1p(-np.clip(lv, 0.0, 1.0)) / lam
        return np.where(lv <= 0.0, 0.0, out)

    def survival_rows(self, X, t):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lam = self._rate_fn(X)
        t = np.broadcast_to(np.asarray(t, dtype=float), lam.shape)
        return np.exp(-lam * t)

    def quantile_rows(self, X, level):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lam = self._rate_fn(X)
        lv = np.broadcast_to(np.asarray(level, dtype=float), lam.shape)
        with np.errstate(divide="ignore"):
            out = -np.log1p(-np.clip(lv, 0.0, 1.0)) / lam
        return np.where(lv <= 0.0, 0.0, out)


def true_censoring_model(setting: SettingSpec) -> ConditionalModel:
    """Analytic model wrapping the setting's exact censoring law."""
    if setting.cens_kind == "lognormal":
        return AnalyticLognormalModel(setting.mu_c, setting.sigma_c, target="censoring")
    return AnalyticExponentialModel(setting.rate_c, target="censoring")


def true_survival_model(setting: SettingSpec) -> ConditionalModel:
    """Analytic model wrapping the setting's exact survival law."""
    return AnalyticLognormalModel(setting.mu_s, setting.sigma_s, target="survival")
