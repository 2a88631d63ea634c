"""Shared test fixtures and deterministic stub models."""

import numpy as np
import pytest

from drcosarc.models import ConditionalModel


class ConstantQuantileModel(ConditionalModel):
    """Stub: quantile(x, a) = x[0] for every level, survival(x, t) = x[1].

    Lets hand-built calibration examples pin scores and weights exactly.
    """

    family = "stub-constant"

    def _quantile(self, xs, level):
        lv = np.asarray(level, dtype=float)
        return np.full(lv.shape, float(xs[0])) if lv.ndim else float(xs[0])

    def _survival(self, xs, t):
        t = np.asarray(t, dtype=float)
        s = float(np.clip(xs[1], 0.0, 1.0))
        return np.full(t.shape, s) if t.ndim else s

    def _density(self, xs, t):
        t = np.asarray(t, dtype=float)
        return np.zeros(t.shape) if t.ndim else 0.0


@pytest.fixture
def stub_model():
    return ConstantQuantileModel()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
