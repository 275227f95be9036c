"""Mixture generator, exact oracle and scenario machinery.

Frozen values were computed independently with scipy.special.gammainc and
brute-force mixture summation before these tests were written.
"""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xflex.distributions import DiscreteGammaParams, GpParams
from xflex.exceptions import ValidationError
from xflex.simlab import (
    SIM_LEVELS,
    ScanConfig,
    ScenarioConfig,
    dgdgp_cdf,
    dgdgp_pmf,
    dgdgp_quantile,
    dgdgp_threshold,
    exceedance_weight,
    oracle_quantiles,
    run_scenario,
    sample_counts,
    sample_scenario,
    scenario_config,
    synthetic_weather_sample,
    threshold_scan,
)

BULK = DiscreteGammaParams(kappa=1.5, scale=math.e)
TAIL = GpParams(sigma=2.5, xi=0.3)
PHI = 0.1


class TestThresholdAndWeight:
    def test_frozen_threshold(self):
        assert dgdgp_threshold(BULK, PHI) == 8

    def test_frozen_weight(self):
        assert exceedance_weight(1.5, math.e, PHI) == pytest.approx(
            0.11728660974854288, abs=1e-14
        )

    def test_degenerate_bulk_threshold_zero(self):
        # almost all bulk mass at zero puts the threshold at zero
        assert dgdgp_threshold(DiscreteGammaParams(kappa=0.5, scale=0.01), PHI) == 0

    def test_high_phi_threshold_zero(self):
        assert dgdgp_threshold(BULK, 0.999) == 0

    @given(
        kappa=st.floats(0.3, 5.0),
        lam=st.floats(0.05, 30.0),
        phi=st.floats(0.01, 0.5),
    )
    @settings(max_examples=200, deadline=None)
    def test_weight_always_exceeds_phi(self, kappa, lam, phi):
        # the integer threshold overshoots, so the mixture tail weight is > phi
        assert exceedance_weight(kappa, lam, phi) > phi


class TestMixtureDistribution:
    def test_cdf_below_threshold_is_bulk(self):
        from xflex.distributions import dgamma_cdf

        u = dgdgp_threshold(BULK, PHI)
        assert dgdgp_cdf(u - 1, BULK, TAIL, PHI) == pytest.approx(
            0.8827133902514571, abs=1e-14
        )
        assert dgdgp_cdf(u - 1, BULK, TAIL, PHI) == pytest.approx(
            dgamma_cdf(u - 1, BULK), abs=1e-15
        )

    def test_frozen_quantiles(self):
        assert dgdgp_quantile(0.5, BULK, TAIL, PHI) == 3
        assert dgdgp_quantile(0.9, BULK, TAIL, PHI) == 8
        assert dgdgp_quantile(0.99, BULK, TAIL, PHI) == 17
        assert dgdgp_quantile(0.999, BULK, TAIL, PHI) == 34

    def test_pmf_normalizes(self):
        k = np.arange(0, 400_000)
        total = dgdgp_pmf(k, BULK, TAIL, PHI).sum()
        # remaining GP mass above the truncation point is analytically tiny
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_pmf_telescopes_to_cdf(self):
        k = np.arange(0, 200)
        np.testing.assert_allclose(
            np.cumsum(dgdgp_pmf(k, BULK, TAIL, PHI)),
            dgdgp_cdf(k, BULK, TAIL, PHI),
            atol=1e-12,
        )

    @given(p=st.floats(0.001, 0.99995))
    @settings(max_examples=200, deadline=None)
    def test_quantile_round_trip(self, p):
        k = dgdgp_quantile(p, BULK, TAIL, PHI)
        assert dgdgp_cdf(k, BULK, TAIL, PHI) >= p
        if k > 0:
            assert dgdgp_cdf(k - 1, BULK, TAIL, PHI) < p


class TestScenarioConfig:
    def test_presets(self):
        c1 = scenario_config(1, 0.3)
        assert c1.tail_scale_const == 2.5
        assert c1.alpha_t == pytest.approx(0.9)
        c2 = scenario_config(2, 0.0)
        assert c2.tail_scale_coeffs == (-0.05, 0.85)
        assert c2.tail_scale_const is None
        c3 = scenario_config(3, 0.3)
        assert c3.scenario_id == 3

    def test_validation(self):
        with pytest.raises(ValidationError):
            scenario_config(4, 0.3)
        with pytest.raises(ValidationError):
            ScenarioConfig(scenario_id=1, xi=0.3, n_per_rep=50)
        with pytest.raises(ValidationError):
            ScenarioConfig(scenario_id=1, xi=0.3, phi=0.0)


class TestSyntheticWeather:
    def test_shape_and_range(self):
        rng = np.random.default_rng(0)
        z = synthetic_weather_sample(5000, rng)
        assert list(z.columns) == ["z1", "z2"]
        assert len(z) == 5000
        assert z.min().min() >= 0.0
        assert z.max().max() <= 1.0

    def test_deterministic(self):
        a = synthetic_weather_sample(100, np.random.default_rng(7))
        b = synthetic_weather_sample(100, np.random.default_rng(7))
        np.testing.assert_array_equal(a.to_numpy(), b.to_numpy())

    def test_covariates_positively_dependent(self):
        z = synthetic_weather_sample(50_000, np.random.default_rng(3))
        corr = np.corrcoef(z["z1"], z["z2"])[0, 1]
        assert corr > 0.3


class TestGeneratorCalibration:
    def test_exceedance_fraction_near_phi(self):
        # empirical fraction of draws at or above the per-row mixture threshold
        config = scenario_config(1, 0.3, seed=5)
        rng = np.random.default_rng(11)
        z = synthetic_weather_sample(100_000, rng)
        y = sample_counts(config, z, rng)
        lam = np.exp(config.bulk_coeffs[0] + config.bulk_coeffs[1] * z["z1"].to_numpy())
        thresh = np.array(
            [dgdgp_threshold(DiscreteGammaParams(config.kappa, lv), config.phi) for lv in lam]
        )
        frac = float(np.mean(y >= thresh))
        assert abs(frac - config.phi) < 0.01

    def test_oracle_matches_sampled_quantiles(self):
        config = scenario_config(1, 0.3, seed=5)
        rng = np.random.default_rng(2)
        z = synthetic_weather_sample(1, rng)
        z = z.iloc[np.zeros(200_000, dtype=int)].reset_index(drop=True)  # one covariate row
        y = sample_counts(config, z, rng)
        want = oracle_quantiles([0.5, 0.9, 0.99], z.iloc[:1], config)[0]
        got = np.quantile(y, [0.5, 0.9, 0.99])
        np.testing.assert_allclose(got, want, atol=1.0)

    def test_scenarios_1_and_3_share_marginal_law(self):
        # z2 is a spectator in both generators; only the fitted model differs
        n = 100_000
        y1 = sample_counts(scenario_config(1, 0.3), synthetic_weather_sample(n, np.random.default_rng(4)), np.random.default_rng(8))
        y3 = sample_counts(scenario_config(3, 0.3), synthetic_weather_sample(n, np.random.default_rng(5)), np.random.default_rng(9))
        hi = int(max(y1.max(), y3.max()))
        c1 = np.bincount(y1, minlength=hi + 1) / n
        c3 = np.bincount(y3, minlength=hi + 1) / n
        ks = np.abs(np.cumsum(c1) - np.cumsum(c3)).max()
        assert ks < 0.01

    def test_oracle_deterministic(self):
        config = scenario_config(2, 0.3)
        z = synthetic_weather_sample(50, np.random.default_rng(1))
        a = oracle_quantiles(SIM_LEVELS, z, config)
        b = oracle_quantiles(SIM_LEVELS, z, config)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (50, len(SIM_LEVELS))
        assert np.all(np.diff(a, axis=1) >= 0)


class TestSampleScenario:
    def test_deterministic_structure(self):
        config = scenario_config(1, 0.0, n_per_rep=120, n_reps=2, seed=3)
        reps = sample_scenario(config)
        assert len(reps) == 2
        first = reps[0]
        assert set(first) >= {"y", "covariates"}
        assert len(first["y"]) == 120
        again = sample_scenario(config)
        np.testing.assert_array_equal(first["y"], again[0]["y"])


class TestRunScenario:
    @pytest.fixture(scope="class")
    def small_run(self):
        config = scenario_config(1, 0.3, n_per_rep=800, n_reps=2, seed=1)
        return run_scenario(config)

    def test_output_structure(self, small_run):
        per, summary = small_run["per_rep"], small_run["summary"]
        assert set(per.columns) == {"rep", "method", "level", "rmse"}
        assert set(per.method) == {"flex", "bulk_only"}
        assert small_run["failures"] == 0
        grouped = per.groupby(["level", "method"])["rmse"].mean()
        for row in summary.itertuples():
            assert grouped[(row.level, row.method)] == pytest.approx(row.rmse_mean)

    def test_bulk_levels_identical_between_methods(self, small_run):
        per = small_run["per_rep"]
        wide = per.pivot_table(index=["rep", "level"], columns="method", values="rmse").reset_index()
        low = wide[wide.level <= 0.75]
        np.testing.assert_array_equal(low.flex.to_numpy(), low.bulk_only.to_numpy())


class TestThresholdScan:
    def test_structure_and_grid(self):
        base = scenario_config(1, 0.3, n_per_rep=800, n_reps=2, seed=2)
        scan = ScanConfig(base=base, grid=(0.88, 0.9))
        out = threshold_scan(scan)
        est, rmse = out["estimates"], out["rmse"]
        assert sorted(np.unique(est.alpha_t)) == [0.88, 0.9]
        assert {"alpha_t", "xi_mean", "xi_sd", "log_sigma_mean", "log_sigma_sd"} <= set(est.columns)
        assert {"alpha_t", "level", "scaled_rmse"} <= set(rmse.columns)
        assert np.all(rmse.scaled_rmse.to_numpy() >= 0)

    def test_default_grid_centered_on_true_level(self):
        base = scenario_config(1, 0.3)
        grid = ScanConfig(base=base).resolved_grid()
        assert len(grid) == 11
        assert min(grid) == pytest.approx(0.85)
        assert max(grid) == pytest.approx(0.95)
        assert any(abs(g - 0.9) < 1e-9 for g in grid)
