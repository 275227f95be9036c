"""Ensemble combination by lead-dependent weighted quantile averaging."""
from __future__ import annotations

import numpy as np
import pytest

from xflex.distributions import GpParams
from xflex.ensemble import (
    DEFAULT_PROB_GRID,
    HRES_MEMBER_ID,
    MemberForecast,
    WeightSchedule,
    combine,
    member_weights,
    weighted_quantile_average,
)
from xflex.exceptions import ValidationError
from xflex.splice import make_spliced


class _ConstDist:
    """Degenerate member whose every quantile equals a constant."""

    def __init__(self, c: float):
        self.c = c

    def quantile(self, prob: float) -> float:
        return self.c

    def quantile_vec(self, probs):
        return np.full(np.asarray(probs).shape, self.c)


class TestMemberWeights:
    def test_schedule_endpoints(self):
        assert member_weights(0.0) == (50.0, 1.0)
        assert member_weights(36.0) == (25.5, 1.0)
        assert member_weights(72.0) == (1.0, 1.0)
        assert member_weights(96.0) == (1.0, 1.0)

    def test_linear_in_between(self):
        hres, member = member_weights(18.0)
        assert hres == pytest.approx(50.0 - 49.0 * 18.0 / 72.0)
        assert member == 1.0

    def test_negative_lead_rejected(self):
        with pytest.raises(ValidationError):
            member_weights(-1.0)

    def test_schedule_validation(self):
        with pytest.raises(ValidationError):
            WeightSchedule(hres_weight_at_0=0.5, member_weight=1.0)
        with pytest.raises(ValidationError):
            WeightSchedule(taper_end_hours=0.0)
        with pytest.raises(ValidationError):
            WeightSchedule(member_weight=0.0)


class TestWeightedQuantileAverage:
    def test_hand_value(self):
        q = np.array([[0.0, 2.0], [10.0, 12.0]])
        w = np.array([3.0, 1.0])
        np.testing.assert_allclose(
            weighted_quantile_average(q, w), [(0 * 3 + 10) / 4, (2 * 3 + 12) / 4]
        )

    def test_weight_validation(self):
        q = np.zeros((2, 3))
        with pytest.raises(ValidationError):
            weighted_quantile_average(q, np.array([1.0]))
        with pytest.raises(ValidationError):
            weighted_quantile_average(q, np.array([1.0, 0.0]))

    def test_scale_equivariance(self):
        rng = np.random.default_rng(8)
        q = rng.uniform(0, 30, size=(4, 9))
        w = rng.uniform(0.5, 3.0, size=4)
        np.testing.assert_allclose(
            weighted_quantile_average(5.0 * q, w), 5.0 * weighted_quantile_average(q, w)
        )

    def test_weight_normalization_invariance(self):
        rng = np.random.default_rng(9)
        q = rng.uniform(0, 30, size=(3, 5))
        w = np.array([2.0, 1.0, 0.5])
        np.testing.assert_allclose(
            weighted_quantile_average(q, w), weighted_quantile_average(q, 7.0 * w)
        )


class TestCombine:
    def test_equal_weight_midpoint(self):
        # two flat members at 0 and 10 with equal weights average to 5 everywhere
        members = [
            MemberForecast(member_id=HRES_MEMBER_ID, lead_hours=0.0, dist=_ConstDist(0.0)),
            MemberForecast(member_id=1, lead_hours=0.0, dist=_ConstDist(10.0)),
        ]
        schedule = WeightSchedule(hres_weight_at_0=1.0, member_weight=1.0)
        combined = combine(members, schedule=schedule)
        assert abs(combined.quantile(0.5) - 5) <= 0.5
        assert abs(combined.quantile(0.95) - 5) <= 0.5

    def test_lead_zero_dominated_by_hres(self):
        members = [
            MemberForecast(member_id=HRES_MEMBER_ID, lead_hours=0.0, dist=_ConstDist(0.0)),
            MemberForecast(member_id=1, lead_hours=0.0, dist=_ConstDist(10.0)),
        ]
        combined = combine(members)  # default 50:1 at lead 0
        assert combined.quantile(0.5) == round(10.0 / 51.0)

    def test_values_monotone_on_grid(self):
        rng = np.random.default_rng(5)
        members = []
        for mid in range(4):
            q50 = rng.uniform(2, 8)
            dist = make_spliced(
                {0.5: q50, 0.9: q50 + rng.uniform(1, 6)}, 0.9, GpParams(sigma=2.0, xi=0.2)
            )
            members.append(MemberForecast(member_id=mid, lead_hours=24.0, dist=dist))
        combined = combine(members)
        assert np.all(np.diff(combined.values) >= 0)
        assert combined.values.dtype.kind == "i"

    def test_on_grid_quantile_uses_stored_values(self):
        members = [
            MemberForecast(member_id=HRES_MEMBER_ID, lead_hours=0.0, dist=_ConstDist(4.0))
        ]
        combined = combine(members)
        for p, v in zip(combined.levels, combined.values):
            assert combined.quantile(float(p)) == int(v)

    def test_off_grid_quantile_averages_members(self):
        members = [
            MemberForecast(
                member_id=HRES_MEMBER_ID,
                lead_hours=0.0,
                dist=make_spliced({0.5: 3.0, 0.9: 9.0}, 0.9, GpParams(sigma=2.5, xi=0.3)),
            )
        ]
        combined = combine(members)
        # 0.9999 is beyond the stored grid; must come from the member tail
        far = combined.quantile(0.9999)
        assert far == members[0].dist.quantile(0.9999)
        assert far > combined.values[-1]

    def test_mixed_leads_rejected(self):
        members = [
            MemberForecast(member_id=0, lead_hours=0.0, dist=_ConstDist(1.0)),
            MemberForecast(member_id=1, lead_hours=24.0, dist=_ConstDist(2.0)),
        ]
        with pytest.raises(ValidationError):
            combine(members)

    def test_duplicate_ids_rejected(self):
        members = [
            MemberForecast(member_id=1, lead_hours=0.0, dist=_ConstDist(1.0)),
            MemberForecast(member_id=1, lead_hours=0.0, dist=_ConstDist(2.0)),
        ]
        with pytest.raises(ValidationError):
            combine(members)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            combine([])

    def test_default_grid_shape(self):
        grid = np.asarray(DEFAULT_PROB_GRID)
        assert grid[0] == pytest.approx(0.005)
        assert grid[-1] == pytest.approx(0.995)
        assert grid.size == 199
        assert np.all(np.diff(grid) > 0)

    def test_sample_deterministic(self):
        members = [
            MemberForecast(
                member_id=HRES_MEMBER_ID,
                lead_hours=0.0,
                dist=make_spliced({0.5: 3.0, 0.9: 9.0}, 0.9, GpParams(sigma=2.0, xi=0.1)),
            )
        ]
        combined = combine(members)
        a = combined.sample(500, seed=3)
        b = combined.sample(500, seed=3)
        np.testing.assert_array_equal(a, b)
