"""Cubic B-spline bases with difference penalties for the additive model terms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .exceptions import RankError, ValidationError


@dataclass(frozen=True)
class SplineSpec:
    """Declaration of one smooth term."""

    covariate: str
    basis_dim: int = 10
    degree: int = 3
    penalty_order: int = 2

    def __post_init__(self):
        if self.degree < 1:
            raise ValidationError(f"degree must be >= 1, got {self.degree}")
        if self.basis_dim < self.degree + 1:
            raise ValidationError(
                f"basis_dim must be >= degree + 1, got {self.basis_dim} with degree {self.degree}"
            )
        if self.penalty_order not in (1, 2):
            raise ValidationError(f"penalty_order must be 1 or 2, got {self.penalty_order}")


@dataclass(frozen=True)
class BasisExpansion:
    """A basis built on training values: design columns, penalty and knot vector.

    Treated as immutable after construction; evaluation at new points clamps to
    the training range so extrapolation stays bounded.
    """

    spec: SplineSpec
    knots: np.ndarray
    design: np.ndarray
    penalty: np.ndarray
    x_min: float = field(default=0.0)
    x_max: float = field(default=1.0)


def difference_penalty(basis_dim: int, order: int) -> np.ndarray:
    """D_r' D_r for the order-r difference matrix on basis_dim coefficients."""
    if order not in (1, 2):
        raise ValidationError(f"penalty order must be 1 or 2, got {order}")
    if basis_dim <= order:
        raise ValidationError("basis_dim must exceed the penalty order")
    d = np.diff(np.eye(basis_dim), n=order, axis=0)
    return d.T @ d


def _knot_vector(values: np.ndarray, spec: SplineSpec) -> np.ndarray:
    distinct = np.unique(values)
    if distinct.size < spec.basis_dim:
        raise RankError(
            f"covariate {spec.covariate!r} has {distinct.size} distinct values, "
            f"need at least basis_dim={spec.basis_dim}"
        )
    lo, hi = float(distinct[0]), float(distinct[-1])
    n_interior = spec.basis_dim - spec.degree - 1
    if n_interior > 0:
        probs = np.arange(1, n_interior + 1) / (n_interior + 1.0)
        interior = np.quantile(distinct, probs)
    else:
        interior = np.array([])
    knots = np.concatenate([np.full(spec.degree + 1, lo), interior, np.full(spec.degree + 1, hi)])
    if np.any(np.diff(knots[spec.degree : len(knots) - spec.degree]) <= 0):
        raise RankError(f"quantile knots for {spec.covariate!r} are not strictly increasing")
    return knots


def build_basis(values, spec: SplineSpec) -> BasisExpansion:
    """Build the basis on training values; interior knots at quantiles of the
    distinct values, boundary knots clamped at the observed range."""
    vals = np.asarray(values, dtype=float)
    if vals.ndim != 1 or vals.size == 0:
        raise ValidationError("values must be a nonempty 1-d array")
    if not np.all(np.isfinite(vals)):
        raise ValidationError(f"covariate {spec.covariate!r} contains non-finite values")
    knots = _knot_vector(vals, spec)
    lo, hi = float(knots[0]), float(knots[-1])
    design = _design_matrix(vals, knots, spec.degree, lo, hi)
    if np.linalg.matrix_rank(design) < spec.basis_dim:
        raise RankError(f"basis for {spec.covariate!r} is rank deficient on the training values")
    penalty = difference_penalty(spec.basis_dim, spec.penalty_order)
    return BasisExpansion(spec=spec, knots=knots, design=design, penalty=penalty, x_min=lo, x_max=hi)


def _design_matrix(x: np.ndarray, knots: np.ndarray, degree: int, lo: float, hi: float) -> np.ndarray:
    clamped = np.clip(x, lo, hi)
    return BSpline.design_matrix(clamped, knots, degree, extrapolate=False).toarray()


def evaluate_basis_matrix(expansion: BasisExpansion, x) -> np.ndarray:
    """Basis rows at new points, clamped to the training range."""
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(xa)):
        raise ValidationError("x must be finite")
    return _design_matrix(xa, expansion.knots, expansion.spec.degree, expansion.x_min, expansion.x_max)


def evaluate_basis(expansion: BasisExpansion, x: float) -> np.ndarray:
    """Single basis row at scalar x."""
    return evaluate_basis_matrix(expansion, [float(x)])[0]


def rebuild_expansion(spec: SplineSpec, knots, x_min: float, x_max: float) -> BasisExpansion:
    """Reconstruct an expansion from stored knots (model deserialization path)."""
    knots = np.asarray(knots, dtype=float)
    expected = spec.basis_dim + spec.degree + 1
    if knots.size != expected:
        raise ValidationError(f"knot vector has length {knots.size}, expected {expected}")
    penalty = difference_penalty(spec.basis_dim, spec.penalty_order)
    return BasisExpansion(
        spec=spec,
        knots=knots,
        design=np.zeros((0, spec.basis_dim)),
        penalty=penalty,
        x_min=float(x_min),
        x_max=float(x_max),
    )
