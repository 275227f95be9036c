"""Additive quantile regression on counts with a smoothed pinball loss.

Each requested level is fitted independently by minimizing

    mean_i[ rho(y_i - eta_i) ] + sum_s w_s * gamma_s' P_s gamma_s,
    rho(u) = (alpha - 1) * u / sigma + bandwidth * log(1 + exp(u / (bandwidth * sigma)))

with eta = intercept + linear terms + sum-to-zero constrained B-spline smooths
on the identity link. Predictions are floored at zero and made non-crossing by
ascending rearrangement across levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np
from scipy import optimize
from scipy.linalg import null_space
from scipy.special import expit

from .exceptions import ConvergenceError, RankError, ValidationError
from .splines import BasisExpansion, SplineSpec, build_basis, evaluate_basis_matrix, rebuild_expansion

Term = Union[str, SplineSpec]

SMOOTH_WEIGHT_GRID = (1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)
BANDWIDTH_GRID = (0.01, 0.05, 0.1, 0.3)
DEFAULT_BANDWIDTH = 0.1
SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class QuantileGrid:
    """Strictly increasing probability levels in (0, 1)."""

    levels: tuple[float, ...]

    def __post_init__(self):
        lv = tuple(float(v) for v in self.levels)
        if len(lv) == 0:
            raise ValidationError("grid must contain at least one level")
        if any(not (0.0 < v < 1.0) for v in lv):
            raise ValidationError(f"levels must lie in (0, 1), got {lv}")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValidationError(f"levels must be strictly increasing, got {lv}")
        object.__setattr__(self, "levels", lv)


@dataclass
class SmoothTermFit:
    """Fitted bookkeeping for one smooth: basis, constraint vector, weight.

    col_means (the training-sample column means of the basis) defines the
    sum-to-zero constraint col_means' gamma = 0 that keeps the smooth from
    absorbing the intercept; the block enters the design as basis @ Z with Z an
    orthonormal null-space basis of that constraint.
    """

    expansion: BasisExpansion
    col_means: np.ndarray
    weight: float

    def constraint_basis(self) -> np.ndarray:
        z = getattr(self, "_z", None)
        if z is None:
            z = _constraint_basis(self.col_means)
            self._z = z
        return z


@dataclass
class QuantileModelSet:
    """Per-level coefficient vectors over a shared design."""

    grid: QuantileGrid
    terms: tuple[Term, ...]
    coefs: dict[float, np.ndarray]
    smooths: dict[str, SmoothTermFit]
    sigma_hat: float
    bandwidth: float
    fit_info: dict[float, dict] = field(default_factory=dict)

    @property
    def levels(self) -> tuple[float, ...]:
        return self.grid.levels


def smoothed_pinball(u, alpha: float, bandwidth: float, sigma: float):
    """Smoothed pinball loss; recovers pinball/sigma as bandwidth -> 0."""
    _check_loss_params(alpha, bandwidth, sigma)
    ua = np.asarray(u, dtype=float)
    t = ua / (bandwidth * sigma)
    out = (alpha - 1.0) * ua / sigma + bandwidth * np.logaddexp(0.0, t)
    return float(out) if np.isscalar(u) else out


def smoothed_pinball_grad(u, alpha: float, bandwidth: float, sigma: float):
    """d/du of smoothed_pinball."""
    _check_loss_params(alpha, bandwidth, sigma)
    ua = np.asarray(u, dtype=float)
    out = ((alpha - 1.0) + expit(ua / (bandwidth * sigma))) / sigma
    return float(out) if np.isscalar(u) else out


def _check_loss_params(alpha: float, bandwidth: float, sigma: float):
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    if bandwidth <= 0:
        raise ValidationError(f"bandwidth must be positive, got {bandwidth}")
    if sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")


def pinball_objective(theta, design, y, alpha, bandwidth, sigma, penalty=None):
    """Penalized smoothed-pinball objective and analytic gradient.

    penalty is a full (p, p) PSD matrix applied as theta' P theta (zeros for
    unpenalized coordinates). Exposed for gradient verification.
    """
    theta = np.asarray(theta, dtype=float)
    u = y - design @ theta
    t = u / (bandwidth * sigma)
    n = y.shape[0]
    val = float(np.mean((alpha - 1.0) * u / sigma + bandwidth * np.logaddexp(0.0, t)))
    psi = ((alpha - 1.0) + expit(t)) / sigma
    grad = -(design.T @ psi) / n
    if penalty is not None:
        val += float(theta @ penalty @ theta)
        grad = grad + 2.0 * (penalty @ theta)
    return val, grad


def _covariate_arrays(x, n: int) -> dict[str, np.ndarray]:
    if hasattr(x, "columns"):  # pandas frame
        cols = {str(c): np.asarray(x[c], dtype=float) for c in x.columns}
    else:
        cols = {str(k): np.asarray(v, dtype=float) for k, v in dict(x).items()}
    for name, arr in cols.items():
        if arr.shape != (n,):
            raise ValidationError(f"covariate {name!r} has shape {arr.shape}, expected ({n},)")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"covariate {name!r} contains non-finite values")
    return cols


def _term_names(terms: Sequence[Term]) -> list[str]:
    names = []
    for t in terms:
        names.append(t if isinstance(t, str) else t.covariate)
    return names


def _require(cols: dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in cols:
        raise ValidationError(f"missing covariate {name!r}")
    return cols[name]


def _constraint_basis(col_means) -> np.ndarray:
    """Orthonormal basis of {gamma : col_means' gamma = 0} (K x (K-1))."""
    c = np.asarray(col_means, dtype=float)[None, :]
    return null_space(c)


def _assemble_design(cols, n, terms, smooths=None):
    """Design matrix [1 | linear | constrained smooth blocks], term slices.

    Smooth blocks are basis @ Z where Z spans the sum-to-zero constraint, so a
    K-dimensional basis contributes K-1 columns and cannot carry a constant.
    """
    blocks = [np.ones((n, 1))]
    slices: dict[str, slice] = {}
    built: dict[str, SmoothTermFit] = {}
    pos = 1
    for term in terms:
        if isinstance(term, str):
            blocks.append(_require(cols, term)[:, None])
            slices[term] = slice(pos, pos + 1)
            pos += 1
        else:
            vals = _require(cols, term.covariate)
            if smooths is None:
                exp = build_basis(vals, term)
                design = exp.design
                means = design.mean(axis=0)
                built[term.covariate] = SmoothTermFit(expansion=exp, col_means=means, weight=1.0)
            else:
                fit = smooths[term.covariate]
                design = evaluate_basis_matrix(fit.expansion, vals)
                built[term.covariate] = fit
            Z = built[term.covariate].constraint_basis()
            blocks.append(design @ Z)
            width = Z.shape[1]
            slices[term.covariate] = slice(pos, pos + width)
            pos += width
    X = np.hstack(blocks)
    return X, slices, built


def _penalty_matrix(p, terms, slices, built, weights):
    P = np.zeros((p, p))
    for term in terms:
        if isinstance(term, SplineSpec):
            sl = slices[term.covariate]
            fit = built[term.covariate]
            Z = fit.constraint_basis()
            P[sl, sl] = weights[term.covariate] * (Z.T @ fit.expansion.penalty @ Z)
    return P


def _canonical_order(y, cols, terms):
    keys = [_require(cols, name) for name in reversed(_term_names(terms))]
    keys.append(y)
    return np.lexsort(keys)


def _preliminary_scale(X, y, P):
    """Robust residual scale from a penalized least-squares mean fit."""
    p = X.shape[1]
    n = X.shape[0]
    lhs = X.T @ X / n + 2.0 * P + 1e-10 * np.eye(p)
    beta = np.linalg.solve(lhs, X.T @ y / n)
    resid = y - X @ beta
    sigma = 1.4826 * float(np.median(np.abs(resid)))
    return max(sigma, SIGMA_FLOOR), beta, resid


def _minimize_level(X, y, alpha, bandwidth, sigma, P, theta0, max_iter, grad_tol):
    res = optimize.minimize(
        pinball_objective,
        theta0,
        args=(X, y, alpha, bandwidth, sigma, P),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "maxfun": 5 * max_iter, "ftol": 1e-15, "gtol": 1e-9},
    )
    theta = res.x
    val, grad = pinball_objective(theta, X, y, alpha, bandwidth, sigma, P)
    n_iter = int(res.nit)
    gnorm = float(np.linalg.norm(grad))
    if gnorm > grad_tol:
        theta, val, grad, extra = _newton_polish(theta, X, y, alpha, bandwidth, sigma, P, grad_tol)
        n_iter += extra
        gnorm = float(np.linalg.norm(grad))
    if gnorm > grad_tol:
        raise ConvergenceError(
            f"level {alpha}: gradient norm {gnorm:.3e} above tolerance {grad_tol:.1e} "
            f"after {n_iter} iterations",
            grad_norm=gnorm,
        )
    return theta, {"iterations": n_iter, "grad_norm": gnorm, "objective": val}


def _newton_polish(theta, X, y, alpha, bandwidth, sigma, P, grad_tol, max_steps=60):
    """Damped Newton steps on the smooth convex objective; exact Hessian."""
    n = y.shape[0]
    val, grad = pinball_objective(theta, X, y, alpha, bandwidth, sigma, P)
    steps = 0
    for _ in range(max_steps):
        if np.linalg.norm(grad) <= grad_tol * 0.5:
            break
        t = (y - X @ theta) / (bandwidth * sigma)
        s = expit(t)
        w = s * (1.0 - s) / (bandwidth * sigma**2)
        H = (X.T * w) @ X / n + 2.0 * P
        mu = 1e-12 * max(1.0, float(np.trace(H)))
        for _ in range(40):
            try:
                step = np.linalg.solve(H + mu * np.eye(H.shape[0]), grad)
                break
            except np.linalg.LinAlgError:
                mu *= 100.0
        else:
            break
        # Backtracking on the objective.
        lr, improved = 1.0, False
        for _ in range(50):
            cand = theta - lr * step
            cval, cgrad = pinball_objective(cand, X, y, alpha, bandwidth, sigma, P)
            if cval <= val - 1e-14 * abs(val) or np.linalg.norm(cgrad) < np.linalg.norm(grad):
                theta, val, grad = cand, cval, cgrad
                improved = True
                break
            lr *= 0.5
        steps += 1
        if not improved:
            break
    return theta, val, grad, steps


def _resolve_weights(smoothing, terms) -> dict[str, float] | None:
    smooth_names = [t.covariate for t in terms if isinstance(t, SplineSpec)]
    if smoothing == "cv":
        return None
    if isinstance(smoothing, Mapping):
        missing = [n for n in smooth_names if n not in smoothing]
        if missing:
            raise ValidationError(f"smoothing weights missing for terms {missing}")
        return {n: float(smoothing[n]) for n in smooth_names}
    w = float(smoothing)
    if w < 0:
        raise ValidationError("smoothing weight must be >= 0")
    return {n: w for n in smooth_names}


def fit_quantile_set(
    y,
    x,
    terms: Sequence[Term],
    grid: QuantileGrid,
    *,
    bandwidth=DEFAULT_BANDWIDTH,
    smoothing=1.0,
    max_iter: int = 10_000,
    grad_tol: float = 1e-6,
) -> QuantileModelSet:
    """Fit one quantile regression per grid level over a shared design.

    Parameters
    ----------
    y : integer counts, length n >= 50.
    x : mapping or DataFrame of covariate arrays.
    terms : sequence of covariate names (linear) and SplineSpec (smooth).
    grid : QuantileGrid of target levels.
    bandwidth : loss smoothing bandwidth, or "cv" to select from
        {0.01, 0.05, 0.1, 0.3} by 5-fold pinball CV.
    smoothing : scalar weight, per-term mapping, or "cv" to select a shared
        weight from {1e-2 .. 1e3} by 5-fold pinball CV.

    Rows are put into a canonical sort order before fitting so the result does
    not depend on input row order.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ValidationError("y must be 1-dimensional")
    n = y.shape[0]
    if n < 50:
        raise ValidationError(f"need at least 50 rows to fit, got {n}")
    if not np.all(np.isfinite(y)) or np.any(y < 0) or np.any(y != np.floor(y)):
        raise ValidationError("y must contain nonnegative integer counts")
    terms = tuple(terms)
    cols = _covariate_arrays(x, n)

    order = _canonical_order(y, cols, terms)
    y = y[order]
    cols = {k: v[order] for k, v in cols.items()}

    weights = _resolve_weights(smoothing, terms)
    if bandwidth == "cv":
        bandwidths = BANDWIDTH_GRID
    else:
        bw = float(bandwidth)
        if bw <= 0:
            raise ValidationError(f"bandwidth must be positive, got {bw}")
        bandwidths = (bw,)

    if weights is None or len(bandwidths) > 1:
        weights, bw = _cv_select(y, cols, terms, grid, weights, bandwidths, max_iter, grad_tol)
    else:
        bw = bandwidths[0]

    return _fit_resolved(y, cols, terms, grid, bw, weights, max_iter, grad_tol)


def _fit_resolved(y, cols, terms, grid, bandwidth, weights, max_iter, grad_tol) -> QuantileModelSet:
    n = y.shape[0]
    X, slices, built = _assemble_design(cols, n, terms, smooths=None)
    p = X.shape[1]
    if np.linalg.matrix_rank(X) < p:
        raise RankError("design matrix is rank deficient")
    P = _penalty_matrix(p, terms, slices, built, weights or {})
    for name, fit in built.items():
        fit.weight = (weights or {}).get(name, 0.0)
    sigma, beta_ls, resid = _preliminary_scale(X, y, P)

    coefs: dict[float, np.ndarray] = {}
    info: dict[float, dict] = {}
    for alpha in grid.levels:
        theta0 = beta_ls.copy()
        theta0[0] += float(np.quantile(resid, alpha))
        theta, level_info = _minimize_level(X, y, alpha, bandwidth, sigma, P, theta0, max_iter, grad_tol)
        coefs[alpha] = theta
        info[alpha] = level_info
    return QuantileModelSet(
        grid=grid,
        terms=terms,
        coefs=coefs,
        smooths=built,
        sigma_hat=sigma,
        bandwidth=bandwidth,
        fit_info=info,
    )


def _cv_select(y, cols, terms, grid, weights, bandwidths, max_iter, grad_tol):
    """5-fold round-robin CV over the requested weight/bandwidth grids; raw
    pinball loss summed across grid levels."""
    n = y.shape[0]
    weight_candidates = [weights] if weights is not None else [
        {t.covariate: w for t in terms if isinstance(t, SplineSpec)} for w in SMOOTH_WEIGHT_GRID
    ]
    if not any(isinstance(t, SplineSpec) for t in terms):
        weight_candidates = [{}]
    best, best_score = None, np.inf
    folds = [np.arange(n) % 5 == k for k in range(5)]
    for bw in bandwidths:
        for wcand in weight_candidates:
            score = 0.0
            try:
                for mask in folds:
                    tr = ~mask
                    ytr = y[tr]
                    ctr = {k: v[tr] for k, v in cols.items()}
                    model = _fit_resolved(ytr, ctr, terms, grid, bw, wcand, max_iter, grad_tol)
                    cte = {k: v[mask] for k, v in cols.items()}
                    preds = predict_quantile_frame(model, cte)
                    for j, alpha in enumerate(grid.levels):
                        score += float(np.sum(pinball_loss(y[mask], preds[:, j], alpha)))
            except (ConvergenceError, RankError):
                continue
            if score < best_score - 1e-12:
                best, best_score = (wcand, bw), score
    if best is None:
        raise ConvergenceError("smoothing CV failed on every candidate")
    return best


def pinball_loss(y, q, alpha: float):
    """Raw pinball loss (used for CV scoring; scoring module re-exports)."""
    y = np.asarray(y, dtype=float)
    q = np.asarray(q, dtype=float)
    diff = y - q
    return np.where(diff >= 0, alpha * diff, (alpha - 1.0) * diff)


def _linear_predictor(model: QuantileModelSet, cols, n: int) -> np.ndarray:
    X, _, _ = _assemble_design(cols, n, model.terms, smooths=model.smooths)
    etas = np.empty((n, len(model.levels)))
    for j, alpha in enumerate(model.levels):
        etas[:, j] = X @ model.coefs[alpha]
    return etas


def predict_quantile_frame(model: QuantileModelSet, x, levels=None) -> np.ndarray:
    """Quantile matrix (rows by requested levels), floored at zero and
    rearranged ascending within the requested level subset."""
    if levels is None:
        levels = model.levels
    levels = list(levels)
    missing = [lv for lv in levels if lv not in model.coefs]
    if missing:
        raise ValidationError(f"levels {missing} were not fitted")
    if hasattr(x, "columns"):
        n = len(x)
    else:
        n = len(next(iter(dict(x).values())))
    cols = _covariate_arrays(x, n)
    etas = _linear_predictor(model, cols, n)
    idx = [model.levels.index(lv) for lv in levels]
    sub = np.maximum(etas[:, idx], 0.0)
    return np.sort(sub, axis=1)


def predict_quantiles(model: QuantileModelSet, x: Mapping[str, float], levels=None) -> dict[float, float]:
    """Quantiles for a single covariate row as a level -> value map."""
    row = {k: np.asarray([float(v)]) for k, v in dict(x).items()}
    if levels is None:
        levels = model.levels
    vals = predict_quantile_frame(model, row, levels=levels)[0]
    return {float(lv): float(v) for lv, v in zip(levels, vals)}
