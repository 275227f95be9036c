"""Green/Amber/Red banding rules over predictive distributions."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xflex.banding import (
    AMBER,
    GREEN,
    RED,
    BandProbabilities,
    BandSpec,
    assign_band,
    band_probs,
)
from xflex.exceptions import ValidationError


class _StepCdf:
    """Stub distribution defined directly by its cdf values."""

    def __init__(self, fn):
        self.fn = fn

    def cdf(self, y):
        return self.fn(y)


class TestAssignBand:
    def test_confident_green(self):
        assert assign_band(BandProbabilities(0.85, 0.10, 0.05)) == GREEN

    def test_red_risk_dominates(self):
        assert assign_band(BandProbabilities(0.50, 0.25, 0.25)) == RED

    def test_amber_when_no_red_risk(self):
        assert assign_band(BandProbabilities(0.60, 0.30, 0.10)) == AMBER

    def test_modal_fallback(self):
        assert assign_band(BandProbabilities(0.70, 0.10, 0.20)) == GREEN

    @given(
        st.tuples(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0)).filter(
            lambda t: sum(t) > 1e-6
        )
    )
    @settings(max_examples=300, deadline=None)
    def test_rule_order(self, raw):
        g, a, r = (v / sum(raw) for v in raw)
        probs = BandProbabilities(g, a, r)
        band = assign_band(probs)
        assert band in (GREEN, AMBER, RED)
        if g > 0.8:
            assert band == GREEN
        elif r > 0.2:
            assert band == RED
        elif a > r:
            assert band == AMBER


class TestBandProbs:
    def test_point_mass_below_thresholds(self):
        dist = _StepCdf(lambda y: 1.0 if y >= 0 else 0.0)
        probs = band_probs(dist, BandSpec(tau_ag=5, tau_ra=10))
        assert (probs.p_green, probs.p_amber, probs.p_red) == (1.0, 0.0, 0.0)

    def test_point_mass_at_red_threshold(self):
        dist = _StepCdf(lambda y: 1.0 if y >= 10 else 0.0)
        probs = band_probs(dist, BandSpec(tau_ag=5, tau_ra=10))
        assert (probs.p_green, probs.p_amber, probs.p_red) == (0.0, 1.0, 0.0)

    def test_uniform_over_twenty(self):
        dist = _StepCdf(lambda y: min((np.floor(y) + 1) / 20.0, 1.0))
        probs = band_probs(dist, BandSpec(tau_ag=4, tau_ra=9))
        assert probs.p_green == pytest.approx(0.25)
        assert probs.p_amber == pytest.approx(0.25)
        assert probs.p_red == pytest.approx(0.5)

    def test_sums_to_one(self):
        dist = _StepCdf(lambda y: min(max((y + 1) / 12.0, 0.0), 1.0))
        probs = band_probs(dist, BandSpec(tau_ag=3, tau_ra=8))
        assert probs.p_green + probs.p_amber + probs.p_red == pytest.approx(1.0, abs=1e-12)


class TestValidation:
    def test_band_probabilities_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            BandProbabilities(0.5, 0.2, 0.2)
        with pytest.raises(ValidationError):
            BandProbabilities(-0.1, 0.6, 0.5)
        with pytest.raises(ValidationError):
            BandProbabilities(1.2, -0.1, -0.1)

    def test_band_spec_thresholds_ordered(self):
        BandSpec(tau_ag=0, tau_ra=1)
        with pytest.raises(ValidationError):
            BandSpec(tau_ag=10, tau_ra=5)
        with pytest.raises(ValidationError):
            BandSpec(tau_ag=5, tau_ra=5)
        with pytest.raises(ValidationError):
            BandSpec(tau_ag=-1, tau_ra=5)
        with pytest.raises(ValidationError):
            BandSpec(tau_ag=1, tau_ra=5, resolution_hours=0)
