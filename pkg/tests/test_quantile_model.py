"""Smoothed-pinball additive quantile regression fits.

Frozen scalars were computed by hand from the closed forms
(softplus-smoothed pinball) before the tests were written.
"""
from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xflex.exceptions import RankError, ValidationError
from xflex.quantile_model import (
    QuantileGrid,
    fit_quantile_set,
    pinball_loss,
    pinball_objective,
    predict_quantile_frame,
    predict_quantiles,
    smoothed_pinball,
    smoothed_pinball_grad,
)
from xflex.splines import SplineSpec


class TestSmoothedPinball:
    def test_frozen_value(self):
        assert smoothed_pinball(1.0, 0.9, 1.0, 1.0) == pytest.approx(
            1.213261687518223, abs=1e-14
        )

    def test_frozen_gradient(self):
        assert smoothed_pinball_grad(1.0, 0.9, 1.0, 1.0) == pytest.approx(
            0.6310585786300049, abs=1e-14
        )

    def test_value_at_zero_residual(self):
        # the alpha-dependent term vanishes, leaving bandwidth * log 2
        assert smoothed_pinball(0.0, 0.5, 0.1, 1.0) == pytest.approx(
            0.1 * math.log(2.0), abs=1e-15
        )

    @given(
        u=st.floats(-50.0, 50.0),
        alpha=st.floats(0.01, 0.99),
        bw=st.floats(0.01, 1.0),
        sigma=st.floats(0.5, 10.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_uniformly_close_to_raw_pinball(self, u, alpha, bw, sigma):
        raw = (alpha - (1.0 if u < 0 else 0.0)) * u / sigma
        smooth = smoothed_pinball(u, alpha, bw, sigma)
        assert smooth >= raw - 1e-12
        assert smooth - raw <= bw * math.log(2.0) + 1e-12

    @given(
        u=st.floats(-20.0, 20.0),
        alpha=st.floats(0.05, 0.95),
        bw=st.floats(0.05, 0.5),
    )
    @settings(max_examples=100, deadline=None)
    def test_gradient_matches_finite_differences(self, u, alpha, bw):
        h = 1e-6
        fd = (
            smoothed_pinball(u + h, alpha, bw, 2.0) - smoothed_pinball(u - h, alpha, bw, 2.0)
        ) / (2 * h)
        assert smoothed_pinball_grad(u, alpha, bw, 2.0) == pytest.approx(fd, abs=1e-7)


class TestPinballObjective:
    def test_value_and_gradient(self):
        rng = np.random.default_rng(0)
        design = np.column_stack([np.ones(40), rng.normal(size=40)])
        y = rng.poisson(5.0, size=40).astype(float)
        penalty = np.eye(2) * 0.5
        theta = np.array([1.0, 0.3])
        val, grad = pinball_objective(theta, design, y, 0.7, 0.1, 2.0, penalty=penalty)
        # value decomposes into mean smoothed loss plus the quadratic penalty
        resid = y - design @ theta
        base = np.mean([smoothed_pinball(u, 0.7, 0.1, 2.0) for u in resid])
        assert val == pytest.approx(base + theta @ penalty @ theta, abs=1e-12)
        h = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            up, _ = pinball_objective(theta + e, design, y, 0.7, 0.1, 2.0, penalty=penalty)
            dn, _ = pinball_objective(theta - e, design, y, 0.7, 0.1, 2.0, penalty=penalty)
            assert grad[j] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-8)


class TestQuantileGrid:
    def test_requires_increasing_interior_levels(self):
        QuantileGrid((0.1, 0.5, 0.9))
        with pytest.raises(ValidationError):
            QuantileGrid((0.5, 0.5))
        with pytest.raises(ValidationError):
            QuantileGrid((0.9, 0.5))
        with pytest.raises(ValidationError):
            QuantileGrid((0.0, 0.5))
        with pytest.raises(ValidationError):
            QuantileGrid((0.5, 1.0))


def _toy_frame(n: int, seed: int = 3) -> tuple[np.ndarray, pd.DataFrame]:
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, 1.0, size=n)
    lam = np.exp(1.0 + 2.0 * z)
    y = rng.poisson(lam)
    return y, pd.DataFrame({"z1": z})


class TestFitQuantileSet:
    def test_median_tracks_conditional_median(self):
        y, x = _toy_frame(2000)
        grid = QuantileGrid((0.5,))
        model = fit_quantile_set(y, x, (SplineSpec("z1", basis_dim=8),), grid, smoothing=1e-4)
        pred = predict_quantile_frame(model, x, levels=(0.5,))[:, 0]
        true_median = np.exp(1.0 + 2.0 * x["z1"].to_numpy())  # Poisson median ~ mean
        assert np.sqrt(np.mean((pred - true_median) ** 2)) < 1.0

    def test_levels_monotone_and_nonnegative(self):
        y, x = _toy_frame(600)
        grid = QuantileGrid((0.1, 0.5, 0.9, 0.99))
        model = fit_quantile_set(y, x, (SplineSpec("z1", basis_dim=8),), grid, smoothing=1e-4)
        pred = predict_quantile_frame(model, x)
        assert np.all(pred >= 0.0)
        assert np.all(np.diff(pred, axis=1) >= 0.0)

    def test_row_order_invariance(self):
        y, x = _toy_frame(400)
        grid = QuantileGrid((0.5, 0.9))
        model_a = fit_quantile_set(y, x, ("z1",), grid, smoothing=1e-4)
        perm = np.random.default_rng(9).permutation(400)
        model_b = fit_quantile_set(y[perm], x.iloc[perm].reset_index(drop=True), ("z1",), grid, smoothing=1e-4)
        for lv in (0.5, 0.9):
            np.testing.assert_allclose(model_a.coefs[lv], model_b.coefs[lv], atol=1e-8)

    def test_prediction_interfaces_agree(self):
        y, x = _toy_frame(300)
        grid = QuantileGrid((0.25, 0.75))
        model = fit_quantile_set(y, x, ("z1",), grid, smoothing=1e-3)
        row = {"z1": 0.4}
        by_dict = predict_quantiles(model, row)
        frame = predict_quantile_frame(model, pd.DataFrame([row]))
        assert by_dict[0.25] == pytest.approx(frame[0, 0], abs=1e-12)
        assert by_dict[0.75] == pytest.approx(frame[0, 1], abs=1e-12)

    def test_input_validation(self):
        y, x = _toy_frame(300)
        grid = QuantileGrid((0.5,))
        with pytest.raises(ValidationError):
            fit_quantile_set(y[:30], x.iloc[:30], ("z1",), grid)  # too few rows
        with pytest.raises(ValidationError):
            fit_quantile_set(y - 1000, x, ("z1",), grid)  # negative counts
        with pytest.raises(ValidationError):
            fit_quantile_set(y + 0.5, x, ("z1",), grid)  # non-integer counts
        with pytest.raises(ValidationError):
            fit_quantile_set(y, x, ("nope",), grid)  # unknown covariate

    def test_constant_covariate_is_rank_deficient(self):
        y, x = _toy_frame(200)
        x = x.assign(z1=0.7)
        with pytest.raises(RankError):
            fit_quantile_set(y, x, (SplineSpec("z1", basis_dim=8),), QuantileGrid((0.5,)))

    def test_cross_validated_smoothing_selects_from_grid(self):
        from xflex.quantile_model import SMOOTH_WEIGHT_GRID

        y, x = _toy_frame(250)
        grid = QuantileGrid((0.5,))
        model = fit_quantile_set(y, x, (SplineSpec("z1", basis_dim=8),), grid, smoothing="cv")
        chosen = {fit.weight for fit in model.smooths.values()}
        assert chosen <= set(SMOOTH_WEIGHT_GRID)


class TestPinballLoss:
    def test_frozen_value(self):
        assert pinball_loss(np.array([3.0]), np.array([1.0]), 0.9) == pytest.approx(1.8)

    def test_minimized_near_empirical_quantile(self):
        rng = np.random.default_rng(12)
        y = rng.normal(size=4000)
        grid = np.linspace(-1.0, 2.0, 301)
        losses = [float(np.mean(pinball_loss(y, np.full(y.size, c), 0.8))) for c in grid]
        best = grid[int(np.argmin(losses))]
        assert best == pytest.approx(np.quantile(y, 0.8), abs=0.05)
