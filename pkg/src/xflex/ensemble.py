"""Combination of per-member predictive distributions by weighted quantile
averaging.

The deterministic high-resolution run (member id 0) gets weight
hres_weight_at_0 at lead 0, decaying linearly to the ensemble member weight at
taper_end_hours and staying there; every other member has unit weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ValidationError
from .splice import BulkCdf, build_bulk_cdf

HRES_MEMBER_ID = 0

DEFAULT_PROB_GRID = tuple(np.round(np.arange(1, 200) * 0.005, 3))


@dataclass(frozen=True)
class WeightSchedule:
    hres_weight_at_0: float = 50.0
    taper_end_hours: float = 72.0
    member_weight: float = 1.0

    def __post_init__(self):
        if self.member_weight <= 0:
            raise ValidationError("member_weight must be positive")
        if self.hres_weight_at_0 < self.member_weight:
            raise ValidationError("hres_weight_at_0 must be >= member_weight")
        if self.taper_end_hours <= 0:
            raise ValidationError("taper_end_hours must be positive")


@dataclass(frozen=True)
class MemberForecast:
    """One member's predictive distribution; anything with a quantile(p) method."""

    member_id: int
    lead_hours: float
    dist: object


def member_weights(lead_hours: float, schedule: WeightSchedule = WeightSchedule()):
    """(hres weight, member weight) at the given lead."""
    if lead_hours < 0:
        raise ValidationError(f"lead_hours must be >= 0, got {lead_hours}")
    frac = min(lead_hours, schedule.taper_end_hours) / schedule.taper_end_hours
    hres = schedule.hres_weight_at_0 - (schedule.hres_weight_at_0 - schedule.member_weight) * frac
    return float(hres), float(schedule.member_weight)


def weighted_quantile_average(quantiles: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted mean across members (axis 0) of a members-by-levels matrix."""
    quantiles = np.asarray(quantiles, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or quantiles.shape[0] != weights.shape[0]:
        raise ValidationError("one weight per member row is required")
    if np.any(weights <= 0):
        raise ValidationError("weights must be positive")
    return weights @ quantiles / weights.sum()


@dataclass
class CombinedForecast:
    """Combined distribution: rounded weighted quantile grid plus the
    interpolated cdf rebuilt from it.

    Quantile queries off the stored grid are served by averaging the member
    quantile functions on demand, so far-tail levels stay available.
    """

    levels: np.ndarray
    values: np.ndarray
    bulk: BulkCdf
    members: tuple[MemberForecast, ...] = field(repr=False, default=())
    weights: np.ndarray | None = field(repr=False, default=None)

    def cdf(self, y):
        return self.bulk.cdf(y)

    def quantile(self, prob: float) -> int:
        if not 0.0 <= prob < 1.0:
            raise ValidationError(f"prob must lie in [0, 1), got {prob}")
        idx = np.searchsorted(self.levels, prob)
        if idx < len(self.levels) and abs(self.levels[idx] - prob) < 1e-12:
            return int(self.values[idx])
        return int(self.quantile_vec(np.asarray([prob]))[0])

    def quantile_vec(self, probs) -> np.ndarray:
        """Vectorized on-demand averaging of the member quantile functions."""
        probs = np.asarray(probs, dtype=float)
        if np.any((probs < 0) | (probs >= 1)):
            raise ValidationError("probs must lie in [0, 1)")
        member_q = np.array([_member_quantile_vec(m.dist, probs) for m in self.members], dtype=float)
        return np.rint(weighted_quantile_average(member_q, self.weights)).astype(np.int64)

    def sample(self, n: int, seed) -> np.ndarray:
        if n < 0:
            raise ValidationError("n must be >= 0")
        rng = np.random.default_rng(seed)
        return self.quantile_vec(rng.random(n))


def _member_quantile_vec(dist, probs: np.ndarray) -> np.ndarray:
    if hasattr(dist, "quantile_vec"):
        return np.asarray(dist.quantile_vec(probs), dtype=float)
    return np.array([dist.quantile(float(p)) for p in probs], dtype=float)


def combine(
    members: Sequence[MemberForecast],
    schedule: WeightSchedule = WeightSchedule(),
    prob_grid: Sequence[float] = DEFAULT_PROB_GRID,
) -> CombinedForecast:
    """Weighted quantile averaging over the probability grid.

    Averaged quantiles are rounded to integers, made monotone by a running
    maximum, and the combined cdf is rebuilt from the cleaned (value, level)
    pairs by the same interpolation the splice uses.
    """
    members = tuple(members)
    if len(members) == 0:
        raise ValidationError("need at least one member forecast")
    ids = [m.member_id for m in members]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate member ids: {sorted(ids)}")
    leads = {float(m.lead_hours) for m in members}
    if len(leads) != 1:
        raise ValidationError(f"members carry mixed lead times: {sorted(leads)}")
    lead = leads.pop()
    hres_w, member_w = member_weights(lead, schedule)
    weights = np.array([hres_w if m.member_id == HRES_MEMBER_ID else member_w for m in members])

    grid = np.asarray(sorted(float(p) for p in prob_grid))
    if np.any((grid <= 0) | (grid >= 1)):
        raise ValidationError("prob_grid levels must lie in (0, 1)")
    member_q = np.array([_member_quantile_vec(m.dist, grid) for m in members], dtype=float)
    averaged = weighted_quantile_average(member_q, weights)
    values = np.maximum.accumulate(np.rint(averaged)).astype(np.int64)
    bulk = build_bulk_cdf({float(p): float(v) for p, v in zip(grid, values)})
    return CombinedForecast(levels=grid, values=values, bulk=bulk, members=members, weights=weights)
