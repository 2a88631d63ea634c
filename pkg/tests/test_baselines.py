import math

import numpy as np
import pytest
from scipy.stats import norm

from drcosarc.baselines import (
    km_decensor_lpb,
    km_decensor_lpb_batch,
    naive_cqr_lpb,
    naive_cqr_lpb_batch,
    oracle_lpb,
    oracle_lpb_batch,
    sample_km_conditional,
    uncalibrated_lpb,
)
from drcosarc.core import Dataset
from drcosarc.models import KMCurve, LognormalAFTModel
from drcosarc.streams import SeedSpec
from drcosarc.synthdata import generate_latent, get_setting


class TestUncalibrated:
    def test_analytic_value(self):
        model = LognormalAFTModel(0.0, [0.0], 1.0)
        lpb = uncalibrated_lpb(model, 0.1, np.array([0.0]))
        assert abs(lpb - math.exp(norm.ppf(0.1))) < 1e-12

    def test_passthrough_equals_model_quantile(self, rng):
        model = LognormalAFTModel(0.3, [0.5, -0.2], 0.7)
        x = rng.normal(size=2)
        assert uncalibrated_lpb(model, 0.2, x) == model.quantile(x, 0.2)

    def test_true_model_coverage(self):
        setting = get_setting(3)
        from drcosarc.synthdata import true_survival_model

        surv = true_survival_model(setting)
        test = generate_latent(setting, 10_000, SeedSpec(40).stream(0, "unc"))
        lpbs = surv.quantile_rows(test.x, 0.1)
        cov = np.mean(test.t >= lpbs)
        assert abs(cov - 0.9) < 0.01


class TestNaiveCQR:
    def test_hand_quantile(self):
        # scores {-1, 0, 2}; with the 1/(n+1) infinity atom the 0.75-quantile is 2
        model = LognormalAFTModel(0.0, [1.0], 0.5)
        q = model.quantile_rows(np.array([[0.0], [1.0], [2.0]]), 0.25)
        times = q - np.array([-1.0, 0.0, 2.0])
        data = Dataset([[0.0], [1.0], [2.0]], times, [1, 1, 1])
        x_test = np.array([3.0])
        lpb = naive_cqr_lpb(data, model, 0.25, x_test)
        assert lpb == pytest.approx(model.quantile(x_test, 0.25) - 2.0)

    def test_never_above_uncalibrated_when_eta_nonneg(self, rng):
        model = LognormalAFTModel(0.2, [0.4], 0.6)
        x = rng.normal(size=(30, 1))
        q = model.quantile_rows(x, 0.1)
        times = np.maximum(q - rng.uniform(0, 1, size=30), 1e-3)  # eta >= 0
        data = Dataset(x, times, np.ones(30))
        x_test = rng.normal(size=(10, 1))
        naive = naive_cqr_lpb_batch(data, model, 0.1, x_test)
        raw = model.quantile_rows(x_test, 0.1)
        assert np.all(naive <= raw + 1e-12)

    def test_infinite_eta_clips_to_zero(self):
        model = LognormalAFTModel(0.0, [1.0], 0.5)
        data = Dataset([[0.0]], [5.0], [1])  # n=1: level 0.75 > 1/2 -> eta = inf
        assert naive_cqr_lpb(data, model, 0.25, np.array([0.3])) == 0.0


class TestKMConditionalSampler:
    def test_step_masses_match(self):
        # drops at 1, 2, 3 and a plateau of 0.25 collapsing to t_max = 4
        curve = KMCurve(np.array([1.0, 2.0, 3.0, 4.0]),
                        np.array([0.75, 0.5, 0.25, 0.25]))
        stream = SeedSpec(41).stream(0, "km-freq")
        n = 100_000
        draws = np.array([sample_km_conditional(curve, 1.5, stream.substream(i))
                          for i in range(n)])
        # conditional on T > 1.5: atoms at 2 and 3 with mass 1/3 each,
        # plus 1/3 collapsed to 4
        for value, p in ((2.0, 1 / 3), (3.0, 1 / 3), (4.0, 1 / 3)):
            freq = np.mean(draws == value)
            se = math.sqrt(p * (1 - p) / n)
            assert abs(freq - p) < 3 * se

    def test_strictly_exceeds_conditioning_time(self):
        curve = KMCurve(np.array([1.0, 2.0]), np.array([0.5, 0.25]))
        stream = SeedSpec(42).stream(0, "km-strict")
        for c in (0.5, 1.0, 1.5, 2.0):
            draws = [sample_km_conditional(curve, c, stream.substream(i))
                     for i in range(200)]
            assert min(draws) > c

    def test_degenerate_curve_returns_largest_time(self):
        curve = KMCurve(np.array([1.0, 2.0]), np.array([0.5, 0.0]))
        diag = {}
        out = sample_km_conditional(curve, 2.0, SeedSpec(43).stream(0, "km-degen"), diag)
        assert out >= 2.0 and diag["km_degenerate"] == 1


class TestKMDecensor:
    def test_no_censoring_equals_naive_cqr(self, rng):
        model = LognormalAFTModel(0.1, [0.3], 0.8)
        x = rng.normal(size=(25, 1))
        times = np.exp(0.1 + 0.3 * x[:, 0] + 0.8 * rng.normal(size=25))
        data = Dataset(x, times, np.ones(25))
        x_test = rng.normal(size=(7, 1))
        stream = SeedSpec(44).stream(0, "km-dec")
        np.testing.assert_array_equal(
            km_decensor_lpb_batch(data, model, 0.1, x_test, stream),
            naive_cqr_lpb_batch(data, model, 0.1, x_test),
        )

    def test_imputed_times_exceed_censoring(self):
        stream = SeedSpec(45).stream(0, "km-dec2")
        n = 60
        x = stream.normal(n).reshape(-1, 1)
        t = np.exp(0.5 * stream.normal(n))
        c = stream.exponential(0.6, n)
        data = Dataset(x, np.minimum(t, c), t < c)
        model = LognormalAFTModel(0.0, [0.5], 1.0)
        lpb = km_decensor_lpb(data, model, 0.1, np.array([0.0]),
                              SeedSpec(46).stream(0, "s"))
        assert lpb >= 0.0  # sampler invariants are covered above

    def test_determinism(self, rng):
        x = rng.normal(size=(30, 1))
        t = np.exp(rng.normal(size=30))
        c = rng.exponential(size=30)
        data = Dataset(x, np.minimum(t, c), t < c)
        model = LognormalAFTModel(0.0, [0.4], 0.9)
        x_test = rng.normal(size=(5, 1))
        a = km_decensor_lpb_batch(data, model, 0.1, x_test, SeedSpec(47).stream(0, "s"))
        b = km_decensor_lpb_batch(data, model, 0.1, x_test, SeedSpec(47).stream(0, "s"))
        np.testing.assert_array_equal(a, b)


class TestOracle:
    def test_setting3_at_origin(self):
        setting = get_setting(3)
        lpb = oracle_lpb(setting, 0.1, np.zeros(100))
        expected = math.exp(math.log(2) + 1 + norm.ppf(0.1))
        assert abs(lpb - expected) < 1e-9
        assert abs(lpb - 1.509) < 2e-3

    def test_setting2_analytic(self):
        setting = get_setting(2)
        x = np.zeros(100)
        x[0] = 1.0
        lpb = oracle_lpb(setting, 0.1, x)
        assert abs(lpb - math.exp(1.0 + 0.1 * norm.ppf(0.1))) < 1e-9
        assert abs(lpb - 2.392) < 2e-3

    def test_simulated_coverage_any_setting(self):
        for sid in (1, 5, 9):
            setting = get_setting(sid)
            test = generate_latent(setting, 10_000, SeedSpec(48).stream(sid, "cov"))
            lpbs = oracle_lpb_batch(setting, 0.1, test.x)
            assert abs(np.mean(test.t >= lpbs) - 0.9) < 0.01

    def test_nonnegative(self):
        setting = get_setting(5)
        assert oracle_lpb(setting, 0.1, np.array([0.0])) >= 0.0
