"""Count-distribution kernels: generalized Pareto, its integer-valued version,
and an integer-valued gamma.

The integer-valued families are defined by flooring the continuous parent:
pmf(k) = F(k + 1) - F(k) and cdf(k) = F(k + 1), so sampling by flooring a
continuous draw is exact inversion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .exceptions import ValidationError

# Below this |xi| the exponential branch of the GP formulas is used.
XI_ZERO_TOL = 1e-10


@dataclass(frozen=True)
class GpParams:
    """Generalized Pareto scale/shape pair, threshold-excess form (support starts at 0)."""

    sigma: float
    xi: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError(f"sigma must be positive and finite, got {self.sigma!r}")
        if not np.isfinite(self.xi):
            raise ValidationError(f"xi must be finite, got {self.xi!r}")

    @property
    def support_max(self) -> float:
        """Largest integer with positive discrete-GP mass; inf when xi >= 0."""
        if self.xi >= 0.0:
            return np.inf
        return float(np.floor(-self.sigma / self.xi))


@dataclass(frozen=True)
class DiscreteGammaParams:
    """Shape/scale pair of the gamma parent used for bulk count simulation."""

    kappa: float
    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.kappa) and self.kappa > 0):
            raise ValidationError(f"kappa must be positive and finite, got {self.kappa!r}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValidationError(f"scale must be positive and finite, got {self.scale!r}")


def _as_float_array(x, name: str, allow_negative: bool = False) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be finite")
    if not allow_negative and np.any(arr < 0):
        raise ValidationError(f"{name} must be >= 0")
    return arr


def _maybe_scalar(arr: np.ndarray, scalar_in: bool):
    return float(arr) if scalar_in else arr


def gp_cdf(y, params: GpParams):
    """Continuous GP cdf at exceedance y >= 0.

    1 - (1 + xi*y/sigma)^(-1/xi) for xi != 0, 1 - exp(-y/sigma) at xi = 0;
    clamps to 1 beyond the upper endpoint -sigma/xi when xi < 0.
    """
    scalar_in = np.isscalar(y)
    ya = _as_float_array(y, "y")
    out = _gp_cdf_raw(ya, params.sigma, params.xi)
    return _maybe_scalar(out, scalar_in)


def _gp_cdf_raw(y: np.ndarray, sigma, xi: float) -> np.ndarray:
    # sigma may be a scalar or an array broadcastable against y.
    if abs(xi) < XI_ZERO_TOL:
        return -np.expm1(-y / sigma)
    z = xi * y / sigma
    safe = np.where(z > -1.0, z, 0.0)
    return np.where(z > -1.0, -np.expm1(-np.log1p(safe) / xi), 1.0)


def gp_quantile(q, params: GpParams):
    """Continuous GP quantile; q in [0, 1). Inverse of gp_cdf."""
    scalar_in = np.isscalar(q)
    qa = _as_float_array(q, "q")
    if np.any(qa >= 1.0) and params.xi >= 0:
        raise ValidationError("quantile at q=1 is unbounded for xi >= 0")
    if np.any(qa > 1.0):
        raise ValidationError("q must lie in [0, 1]")
    out = _gp_quantile_raw(qa, params.sigma, params.xi)
    return _maybe_scalar(out, scalar_in)


def _gp_quantile_raw(q: np.ndarray, sigma, xi: float) -> np.ndarray:
    # q = 1 with xi < 0 passes through log1p(-1) = -inf to the finite endpoint.
    with np.errstate(divide="ignore"):
        if abs(xi) < XI_ZERO_TOL:
            return -sigma * np.log1p(-q)
        return sigma / xi * np.expm1(-xi * np.log1p(-q))


def _check_counts(k, name: str = "k") -> np.ndarray:
    arr = np.asarray(k, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be finite")
    if np.any(arr < 0) or np.any(arr != np.floor(arr)):
        raise ValidationError(f"{name} must contain nonnegative integers")
    return arr


def dgp_pmf(k, params: GpParams):
    """Discrete GP mass at integer k >= 0: gp_cdf(k+1) - gp_cdf(k)."""
    scalar_in = np.isscalar(k)
    ka = _check_counts(k)
    out = _gp_cdf_raw(ka + 1.0, params.sigma, params.xi) - _gp_cdf_raw(ka, params.sigma, params.xi)
    return _maybe_scalar(np.maximum(out, 0.0), scalar_in)


def dgp_cdf(k, params: GpParams):
    """Discrete GP cdf at integer k >= 0: gp_cdf(k+1)."""
    scalar_in = np.isscalar(k)
    ka = _check_counts(k)
    return _maybe_scalar(_gp_cdf_raw(ka + 1.0, params.sigma, params.xi), scalar_in)


def dgp_quantile(q, params: GpParams):
    """Smallest integer k with dgp_cdf(k) >= q."""
    scalar_in = np.isscalar(q)
    qa = _as_float_array(q, "q")
    if np.any((qa < 0) | (qa > 1)):
        raise ValidationError("q must lie in [0, 1]")
    if np.any(qa >= 1.0) and params.xi >= 0:
        raise ValidationError("quantile at q=1 is unbounded for xi >= 0")
    cont = _gp_quantile_raw(np.minimum(qa, 1.0), params.sigma, params.xi)
    k = np.maximum(np.ceil(cont - 1.0), 0.0)
    # Float fix-up: the closed form can land one integer off at knot points.
    cdf = _gp_cdf_raw(k + 1.0, params.sigma, params.xi)
    k = np.where(cdf < qa, k + 1.0, k)
    down_ok = (k > 0) & (_gp_cdf_raw(k, params.sigma, params.xi) >= qa)
    k = np.where(down_ok, k - 1.0, k)
    if params.xi < 0:
        k = np.minimum(k, params.support_max)
    return int(k) if scalar_in else k.astype(np.int64)


def dgp_sample(n: int, params: GpParams, seed) -> np.ndarray:
    """n draws by flooring continuous GP inversion; deterministic given seed."""
    if n < 0:
        raise ValidationError("n must be >= 0")
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    k = np.floor(_gp_quantile_raw(u, params.sigma, params.xi))
    if params.xi < 0:
        k = np.minimum(k, params.support_max)
    return k.astype(np.int64)


def _dgp_logpmf_raw(k: np.ndarray, sigma, xi: float) -> np.ndarray:
    """Elementwise log pmf; -inf where the observation has zero mass.

    sigma may be scalar or per-observation. Uses log-survival differences so
    far-tail masses do not cancel.
    """
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), k.shape).astype(float)
    if abs(xi) < XI_ZERO_TOL:
        log_s0 = -k / sig
        delta = -1.0 / sig
        return log_s0 + np.log(-np.expm1(delta))
    z0 = xi * k / sig
    z1 = xi * (k + 1.0) / sig
    out = np.full(k.shape, -np.inf)
    inside = z0 > -1.0
    log_s0 = np.where(inside, -np.log1p(np.where(inside, z0, 0.0)) / xi, -np.inf)
    # k+1 beyond the upper endpoint: the point mass is the whole remaining survival.
    last = inside & (z1 <= -1.0)
    out[last] = log_s0[last]
    both = inside & (z1 > -1.0)
    if np.any(both):
        delta = -(np.log1p(np.where(both, z1, 0.0)) - np.log1p(np.where(both, z0, 0.0))) / xi
        with np.errstate(divide="ignore"):
            out[both] = log_s0[both] + np.log(-np.expm1(delta[both]))
    return out


def dgp_loglik(k, sigma, xi: float) -> float:
    """Sum of discrete GP log masses; -inf when any observation has zero mass.

    sigma is scalar or one value per observation (covariate-dependent scale).
    """
    ka = _check_counts(k)
    sig = np.asarray(sigma, dtype=float)
    if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
        raise ValidationError("sigma must be positive and finite")
    if sig.ndim > 0 and sig.shape != ka.shape:
        raise ValidationError("sigma must be scalar or match k in length")
    lp = _dgp_logpmf_raw(np.atleast_1d(ka), sig, xi)
    return float(np.sum(lp))


def dgp_loglik_grad(k, sigma, xi: float):
    """Log-likelihood and its gradient in (sigma, xi).

    Returns (loglik, d/dsigma per observation, d/dxi summed). Infeasible
    observations give loglik -inf and zero gradients (callers penalize
    separately).
    """
    ka = np.atleast_1d(_check_counts(k))
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), ka.shape).astype(float)

    def dlog_s(y):
        """(log s, d log s/d sigma, d log s/d xi) for survival s(y); y >= 0 array."""
        z = xi * y / sig
        inside = z > -1.0
        zsafe = np.where(inside, z, 0.0)
        wsafe = 1.0 + zsafe
        if abs(xi) < XI_ZERO_TOL:
            ls = -y / sig
        else:
            ls = -np.log1p(zsafe) / xi
        dsig = y / (sig**2 * wsafe)
        small = np.abs(zsafe) < 1e-4
        r = y / sig
        series = r**2 * (0.5 - (2.0 / 3.0) * zsafe + 0.75 * zsafe**2)
        if abs(xi) < XI_ZERO_TOL:
            dxi = series
        else:
            exact = np.log1p(zsafe) / xi**2 - y / (xi * sig * wsafe)
            dxi = np.where(small, series, exact)
        ls = np.where(inside, ls, -np.inf)
        dsig = np.where(inside, dsig, 0.0)
        dxi = np.where(inside, dxi, 0.0)
        return ls, dsig, dxi

    ls0, dsig0, dxi0 = dlog_s(ka)
    ls1, dsig1, dxi1 = dlog_s(ka + 1.0)
    s0 = np.exp(ls0)
    s1 = np.where(np.isfinite(ls1), np.exp(ls1), 0.0)
    pmf = s0 - s1
    feasible = np.isfinite(ls0) & (pmf > 0.0)
    pmf_safe = np.where(feasible, pmf, 1.0)
    dsig = (s0 * dsig0 - s1 * dsig1) / pmf_safe
    dxi = (s0 * dxi0 - s1 * dxi1) / pmf_safe
    if not np.all(feasible):
        return -np.inf, np.zeros_like(ka), 0.0
    with np.errstate(divide="ignore"):
        ll = float(np.sum(np.log(pmf)))
    return ll, dsig, float(np.sum(dxi))


def dgamma_pmf(k, params: DiscreteGammaParams):
    """Integer-valued gamma mass: F_gamma(k+1) - F_gamma(k) via regularized incomplete gamma."""
    scalar_in = np.isscalar(k)
    ka = _check_counts(k)
    out = special.gammainc(params.kappa, (ka + 1.0) / params.scale) - special.gammainc(
        params.kappa, ka / params.scale
    )
    return _maybe_scalar(np.maximum(out, 0.0), scalar_in)


def dgamma_cdf(k, params: DiscreteGammaParams):
    """Integer-valued gamma cdf: F_gamma(k+1)."""
    scalar_in = np.isscalar(k)
    ka = _check_counts(k)
    return _maybe_scalar(special.gammainc(params.kappa, (ka + 1.0) / params.scale), scalar_in)


def dgamma_quantile(level, params: DiscreteGammaParams):
    """Smallest integer k with dgamma_cdf(k) >= level."""
    scalar_in = np.isscalar(level)
    la = _as_float_array(level, "level")
    if np.any((la < 0) | (la >= 1)):
        raise ValidationError("level must lie in [0, 1)")
    cont = stats.gamma.ppf(la, params.kappa, scale=params.scale)
    k = np.maximum(np.ceil(cont - 1.0), 0.0)
    cdf = special.gammainc(params.kappa, (k + 1.0) / params.scale)
    k = np.where(cdf < la, k + 1.0, k)
    down_ok = (k > 0) & (special.gammainc(params.kappa, k / params.scale) >= la)
    k = np.where(down_ok, k - 1.0, k)
    return int(k) if scalar_in else k.astype(np.int64)


def dgamma_sample(n: int, params: DiscreteGammaParams, seed) -> np.ndarray:
    """n draws by flooring continuous gamma draws; deterministic given seed."""
    if n < 0:
        raise ValidationError("n must be >= 0")
    rng = np.random.default_rng(seed)
    x = rng.gamma(shape=params.kappa, scale=params.scale, size=n)
    return np.floor(x).astype(np.int64)
