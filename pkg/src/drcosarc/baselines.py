"""Benchmark calibrators: oracle, uncalibrated, naive CQR, KM decensoring.

All four return nonnegative times; infinite calibration quantiles clip the
bound to 0 (the vacuous value for positive survival times).
"""

from __future__ import annotations

import enum

import numpy as np

from .core import Dataset, DiscreteDistribution, weighted_quantile
from .models import ConditionalModel, KMCurve, fit_kaplan_meier
from .streams import RandomStream
from .synthdata import SettingSpec, oracle_quantile

__all__ = [
    "BaselineTag",
    "uncalibrated_lpb",
    "naive_cqr_lpb",
    "km_decensor_lpb",
    "oracle_lpb",
    "uncalibrated_lpb_batch",
    "naive_cqr_lpb_batch",
    "km_decensor_lpb_batch",
    "oracle_lpb_batch",
    "sample_km_conditional",
]


class BaselineTag(enum.Enum):
    ORACLE = "oracle"
    UNCALIBRATED = "uncalibrated"
    NAIVE_CQR = "naive_cqr"
    KM_DECENSOR = "km_decensor"


def uncalibrated_lpb(surv: ConditionalModel, alpha: float, x_test) -> float:
    """Raw model quantile, no calibration."""
    return float(surv.quantile(x_test, alpha))


def uncalibrated_lpb_batch(surv: ConditionalModel, alpha: float, X_test) -> np.ndarray:
    return np.asarray(surv.quantile_rows(X_test, alpha), dtype=float)


def _split_conformal_eta(scores: np.ndarray, alpha: float) -> float:
    """Unweighted split-conformal quantile with the (n+1)-denominator inf atom."""
    n = scores.size
    mass = np.full(n + 1, 1.0 / (n + 1))
    dist = DiscreteDistribution(np.concatenate([scores, [np.inf]]), mass)
    return weighted_quantile(dist, 1.0 - alpha)


def naive_cqr_lpb(data: Dataset, surv: ConditionalModel, alpha: float, x_test) -> float:
    """Split CQR aimed at the censored time t_tilde instead of the survival time."""
    return float(naive_cqr_lpb_batch(data, surv, alpha, np.atleast_2d(x_test))[0])


def naive_cqr_lpb_batch(data: Dataset, surv: ConditionalModel, alpha: float,
                        X_test) -> np.ndarray:
    q_cal = np.asarray(surv.quantile_rows(data.x, alpha), dtype=float)
    eta = _split_conformal_eta(q_cal - data.time, alpha)
    q_test = np.asarray(surv.quantile_rows(X_test, alpha), dtype=float)
    if np.isinf(eta):
        return np.zeros_like(q_test)
    return np.maximum(q_test - eta, 0.0)


def sample_km_conditional(curve: KMCurve, c: float, stream: RandomStream,
                          diagnostics: dict | None = None) -> float:
    """Draw from the KM law conditioned on exceeding c.

    The KM law is discrete on the drop times; the (possibly improper) mass
    beyond the last drop collapses to the largest observed time.  A
    degenerate conditioning point (S(c) = 0) also returns the largest
    observed time.
    """
    # the collapse target stays strictly above c even when c is itself the
    # largest observed time (truncation support must remain open at c)
    t_max = max(float(curve.times[-1]), float(np.nextafter(c, np.inf)))
    s_c = float(curve.survival_at(c))
    if s_c <= 0.0:
        if diagnostics is not None:
            diagnostics["km_degenerate"] = diagnostics.get("km_degenerate", 0) + 1
        return t_max
    u = float(stream.uniform())
    target = s_c * (1.0 - u)
    # first drop time beyond c whose survival falls to the target or below
    drops = np.concatenate(([curve.surv[0] < 1.0], np.diff(curve.surv) < 0))
    times = curve.times[drops]
    surv = curve.surv[drops]
    beyond = times > c
    hit = beyond & (surv <= target)
    if not hit.any():
        return t_max
    return float(times[np.argmax(hit)])


def km_decensor_lpb(data: Dataset, surv: ConditionalModel, alpha: float,
                    x_test, stream: RandomStream) -> float:
    """Impute latent survival times from the marginal KM law, then split CQR."""
    return float(km_decensor_lpb_batch(data, surv, alpha, np.atleast_2d(x_test), stream)[0])


def km_decensor_lpb_batch(data: Dataset, surv: ConditionalModel, alpha: float,
                          X_test, stream: RandomStream,
                          diagnostics: dict | None = None) -> np.ndarray:
    curve = fit_kaplan_meier(data.time, data.event)
    t_imp = data.time.copy()
    for i in np.flatnonzero(~data.event):
        t_imp[i] = sample_km_conditional(curve, float(data.time[i]),
                                         stream.substream(int(i)), diagnostics)
    q_cal = np.asarray(surv.quantile_rows(data.x, alpha), dtype=float)
    eta = _split_conformal_eta(q_cal - t_imp, alpha)
    q_test = np.asarray(surv.quantile_rows(X_test, alpha), dtype=float)
    if np.isinf(eta):
        return np.zeros_like(q_test)
    return np.maximum(q_test - eta, 0.0)


def oracle_lpb(setting: SettingSpec, alpha: float, x_test) -> float:
    """True conditional alpha-quantile; synthetic settings only."""
    return float(oracle_quantile(setting, x_test, alpha))


def oracle_lpb_batch(setting: SettingSpec, alpha: float, X_test) -> np.ndarray:
    return np.asarray(oracle_quantile(setting, np.atleast_2d(X_test), alpha), dtype=float)
