"""Spliced predictive distribution over counts.

Below the floored splice quantile the cdf is the piecewise-linear
interpolation through the fitted (quantile, level) pairs with a left anchor at
(-1, 0); at and above the ceiling it hands over to a discrete GP rescaled to
the remaining mass:

    F(y) = F_bulk(y)                                  y <  ceil(q)
    F(y) = a + (1 - a) * F_dgp(y - ceil(q))           y >= ceil(q),   a = F_bulk(floor(q)).

When q is an integer the tail branch owns the shared point. The cdf is a
function of integers; non-integer queries are floored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .distributions import GpParams, _gp_cdf_raw, _gp_quantile_raw
from .exceptions import ValidationError
from .tail_model import TailModel, tail_scale

_MATERIALIZE_CAP = 1_000_000


class BulkCdf:
    """Piecewise-linear cdf through quantile knots, anchored at (-1, 0)."""

    def __init__(self, xs: np.ndarray, ps: np.ndarray):
        self.xs = xs
        self.ps = ps

    @property
    def top_level(self) -> float:
        return float(self.ps[-1])

    def cdf(self, y):
        scalar_in = np.isscalar(y)
        ya = np.floor(np.asarray(y, dtype=float))
        out = np.interp(ya, self.xs, self.ps, left=0.0, right=self.ps[-1])
        return float(out) if scalar_in else out

    def quantile(self, prob: float) -> int:
        """Smallest integer k >= 0 with cdf(k) >= prob; prob must not exceed the top level."""
        if prob <= 0.0:
            return 0
        if prob > self.ps[-1]:
            raise ValidationError(f"bulk cdf tops out at {self.ps[-1]}, cannot invert {prob}")
        x = float(np.interp(prob, self.ps, self.xs))
        k = max(int(np.ceil(x - 1e-12)), 0)
        while self.cdf(k) < prob:
            k += 1
        while k > 0 and self.cdf(k - 1) >= prob:
            k -= 1
        return k

    def quantile_vec(self, probs: np.ndarray) -> np.ndarray:
        """Vectorized quantile; probs must not exceed the top level."""
        probs = np.asarray(probs, dtype=float)
        top = max(int(self.xs[-1]), 0)
        if top <= _MATERIALIZE_CAP:
            grid_cdf = self.cdf(np.arange(top + 1, dtype=float))
            out = np.searchsorted(grid_cdf, probs, side="left")
            return np.minimum(out, top).astype(np.int64)
        x = np.interp(probs, self.ps, self.xs)
        k = np.maximum(np.ceil(x - 1e-12), 0.0)
        k[self.cdf(k) < probs] += 1.0
        return k.astype(np.int64)


def build_bulk_cdf(quantiles: Mapping[float, float]) -> BulkCdf:
    """Interpolation knots from a level -> quantile map.

    Levels must lie in (0, 1) and quantile values must be nondecreasing in the
    level. Coincident values collapse to the highest level at that value.
    """
    if len(quantiles) == 0:
        raise ValidationError("need at least one quantile to build a bulk cdf")
    items = sorted((float(lv), float(qv)) for lv, qv in quantiles.items())
    levels = np.array([lv for lv, _ in items])
    values = np.array([qv for _, qv in items])
    if np.any((levels <= 0) | (levels >= 1)):
        raise ValidationError("levels must lie in (0, 1)")
    if np.any(np.diff(values) < 0):
        raise ValidationError("quantile values must be nondecreasing in the level")
    if np.any(values < 0):
        raise ValidationError("quantile values must be >= 0")
    xs, ps = [-1.0], [0.0]
    for lv, qv in items:
        if qv == xs[-1]:
            ps[-1] = lv  # shared value takes the higher level
        else:
            xs.append(qv)
            ps.append(lv)
    return BulkCdf(np.asarray(xs), np.asarray(ps))


@dataclass
class PredictiveDistribution:
    """Spliced bulk/tail distribution for one forecast instance."""

    bulk: BulkCdf
    splice_floor: int
    splice_ceil: int
    alpha_tilde: float
    tail: GpParams
    alpha_t: float
    bulk_only: bool = False

    def cdf(self, y):
        scalar_in = np.isscalar(y)
        ya = np.floor(np.asarray(y, dtype=float))
        out = np.where(ya < 0, 0.0, self.bulk.cdf(np.maximum(ya, 0.0)))
        if not self.bulk_only:
            tail_mask = ya >= self.splice_ceil
            if np.any(tail_mask):
                exc = ya[tail_mask] - self.splice_ceil
                tail_cdf = _gp_cdf_raw(exc + 1.0, self.tail.sigma, self.tail.xi)
                out = np.array(out, dtype=float)
                out[tail_mask] = self.alpha_tilde + (1.0 - self.alpha_tilde) * tail_cdf
        out = np.where(ya < 0, 0.0, out)
        return float(out) if scalar_in else out

    def pmf(self, y):
        scalar_in = np.isscalar(y)
        ya = np.asarray(y, dtype=float)
        if np.any(ya != np.floor(ya)):
            raise ValidationError("pmf is defined on integers")
        out = np.maximum(self.cdf(ya) - self.cdf(ya - 1.0), 0.0)
        return float(out) if scalar_in else out

    def quantile(self, prob: float) -> int:
        """Smallest integer with cdf >= prob; prob in [0, 1)."""
        if not 0.0 <= prob <= 1.0:
            raise ValidationError(f"prob must lie in [0, 1], got {prob}")
        if prob >= 1.0:
            if self.tail.xi < 0 and not self.bulk_only:
                return int(self.splice_ceil + self.tail.support_max)
            raise ValidationError("quantile at prob=1 is unbounded for xi >= 0")
        if self.bulk_only:
            return self.bulk.quantile(min(prob, self.bulk.top_level))
        if prob <= self.alpha_tilde:
            return self.bulk.quantile(prob)
        q = (prob - self.alpha_tilde) / (1.0 - self.alpha_tilde)
        cont = _gp_quantile_raw(np.asarray(q), self.tail.sigma, self.tail.xi)
        j = max(int(np.ceil(float(cont) - 1.0)), 0)
        while self._tail_cdf(j) < prob:
            j += 1
        while j > 0 and self._tail_cdf(j - 1) >= prob:
            j -= 1
        return self.splice_ceil + j

    def _tail_cdf(self, j: int) -> float:
        return self.alpha_tilde + (1.0 - self.alpha_tilde) * float(
            _gp_cdf_raw(np.asarray(j + 1.0), self.tail.sigma, self.tail.xi)
        )

    def quantile_vec(self, probs) -> np.ndarray:
        """Vectorized quantile for probs in [0, 1)."""
        probs = np.asarray(probs, dtype=float)
        if np.any((probs < 0) | (probs >= 1)):
            raise ValidationError("probs must lie in [0, 1)")
        out = np.empty(probs.shape, dtype=np.int64)
        bulk_mask = probs <= self.alpha_tilde if not self.bulk_only else np.ones(probs.shape, bool)
        if np.any(bulk_mask):
            out[bulk_mask] = self.bulk.quantile_vec(
                np.minimum(probs[bulk_mask], self.bulk.top_level)
            )
        if not self.bulk_only and np.any(~bulk_mask):
            q = (probs[~bulk_mask] - self.alpha_tilde) / (1.0 - self.alpha_tilde)
            cont = _gp_quantile_raw(q, self.tail.sigma, self.tail.xi)
            j = np.maximum(np.ceil(cont - 1.0), 0.0)
            if self.tail.xi < 0:
                j = np.minimum(j, self.tail.support_max)
            out[~bulk_mask] = self.splice_ceil + j.astype(np.int64)
        return out

    def sample(self, n: int, seed) -> np.ndarray:
        """n integer draws by inversion of uniforms; deterministic given seed."""
        if n < 0:
            raise ValidationError("n must be >= 0")
        rng = np.random.default_rng(seed)
        return self.quantile_vec(rng.random(n))


def make_spliced(
    bulk_quantiles: Mapping[float, float],
    alpha_t: float,
    tail: GpParams,
) -> PredictiveDistribution:
    """Splice explicit bulk quantiles with explicit tail parameters."""
    levels = sorted(float(lv) for lv in bulk_quantiles)
    match = [lv for lv in levels if abs(lv - alpha_t) < 1e-9]
    if not match:
        raise ValidationError(f"splice level {alpha_t} missing from bulk quantiles {levels}")
    alpha_t = match[0]
    used = {lv: qv for lv, qv in bulk_quantiles.items() if float(lv) <= alpha_t + 1e-9}
    q_t = float(used[[lv for lv in used if abs(float(lv) - alpha_t) < 1e-9][0]])
    bulk = build_bulk_cdf(used)
    floor_q = int(np.floor(q_t))
    ceil_q = int(np.ceil(q_t))
    alpha_tilde = float(bulk.cdf(float(floor_q)))
    bulk_only = alpha_tilde >= 1.0 - 1e-12
    return PredictiveDistribution(
        bulk=bulk,
        splice_floor=floor_q,
        splice_ceil=ceil_q,
        alpha_tilde=alpha_tilde,
        tail=tail,
        alpha_t=alpha_t,
        bulk_only=bulk_only,
    )


def splice_cdf(
    bulk_quantiles: Mapping[float, float],
    alpha_t: float,
    tail: TailModel,
    x: Mapping[str, float] | None = None,
) -> PredictiveDistribution:
    """Splice fitted bulk quantiles with a fitted tail evaluated at covariates x."""
    sigma = tail_scale(tail, x)
    return make_spliced(bulk_quantiles, alpha_t, GpParams(sigma=sigma, xi=tail.xi))


def make_bulk_only(bulk_quantiles: Mapping[float, float]) -> PredictiveDistribution:
    """Interpolated quantile-regression cdf with no tail: quantile queries above
    the top fitted level clamp to the top quantile (structural truncation)."""
    bulk = build_bulk_cdf(bulk_quantiles)
    top = max(int(bulk.xs[-1]), 0)
    return PredictiveDistribution(
        bulk=bulk,
        splice_floor=top,
        splice_ceil=top,
        alpha_tilde=bulk.top_level,
        tail=GpParams(sigma=1.0, xi=0.0),
        alpha_t=bulk.top_level,
        bulk_only=True,
    )


def dist_cdf(dist: PredictiveDistribution, y):
    return dist.cdf(y)


def dist_quantile(dist: PredictiveDistribution, prob: float) -> int:
    return dist.quantile(prob)


def dist_sample(dist: PredictiveDistribution, n: int, seed) -> np.ndarray:
    return dist.sample(n, seed)
