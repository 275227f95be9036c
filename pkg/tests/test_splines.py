"""Penalized B-spline basis construction and difference penalties."""
from __future__ import annotations

import numpy as np
import pytest

from xflex.exceptions import RankError, ValidationError
from xflex.splines import (
    SplineSpec,
    build_basis,
    difference_penalty,
    evaluate_basis,
    evaluate_basis_matrix,
    rebuild_expansion,
)


class TestDifferencePenalty:
    def test_second_order_frozen(self):
        want = np.array(
            [
                [1.0, -2.0, 1.0, 0.0],
                [-2.0, 5.0, -4.0, 1.0],
                [1.0, -4.0, 5.0, -2.0],
                [0.0, 1.0, -2.0, 1.0],
            ]
        )
        np.testing.assert_array_equal(difference_penalty(4, 2), want)

    def test_first_order_frozen(self):
        want = np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
        np.testing.assert_array_equal(difference_penalty(3, 1), want)

    def test_symmetric_psd(self):
        p = difference_penalty(12, 2)
        np.testing.assert_array_equal(p, p.T)
        eig = np.linalg.eigvalsh(p)
        assert eig.min() > -1e-12

    def test_null_space_is_low_order_polynomials(self):
        p2 = difference_penalty(8, 2)
        ones = np.ones(8)
        ramp = np.arange(8.0)
        np.testing.assert_allclose(p2 @ ones, 0.0, atol=1e-12)
        np.testing.assert_allclose(p2 @ ramp, 0.0, atol=1e-12)
        # quadratic is *not* annihilated at order 2
        assert np.abs(p2 @ ramp**2).max() > 0.1

    def test_invalid_order(self):
        with pytest.raises(ValidationError):
            difference_penalty(4, 0)
        with pytest.raises(ValidationError):
            difference_penalty(3, 3)


class TestBuildBasis:
    def setup_method(self):
        rng = np.random.default_rng(42)
        self.x = rng.uniform(0.0, 10.0, size=400)
        self.spec = SplineSpec(covariate="z1", basis_dim=10)

    def test_partition_of_unity(self):
        exp = build_basis(self.x, self.spec)
        design = evaluate_basis_matrix(exp, self.x)
        assert design.shape == (400, 10)
        np.testing.assert_allclose(design.sum(axis=1), 1.0, atol=1e-12)

    def test_deterministic(self):
        a = build_basis(self.x, self.spec)
        b = build_basis(self.x, self.spec)
        np.testing.assert_array_equal(a.knots, b.knots)

    def test_out_of_range_clipped(self):
        exp = build_basis(self.x, self.spec)
        lo = evaluate_basis(exp, self.x.min() - 5.0)
        hi = evaluate_basis(exp, self.x.max() + 5.0)
        np.testing.assert_allclose(lo, evaluate_basis(exp, float(self.x.min())), atol=1e-12)
        np.testing.assert_allclose(hi, evaluate_basis(exp, float(self.x.max())), atol=1e-12)

    def test_scalar_row_matches_matrix(self):
        exp = build_basis(self.x, self.spec)
        row = evaluate_basis(exp, 3.3)
        mat = evaluate_basis_matrix(exp, np.array([3.3]))
        np.testing.assert_allclose(row, mat[0], atol=1e-14)

    def test_too_few_distinct_values(self):
        x = np.repeat([1.0, 2.0, 3.0], 50)
        with pytest.raises(RankError):
            build_basis(x, self.spec)

    def test_rebuild_round_trip(self):
        exp = build_basis(self.x, self.spec)
        clone = rebuild_expansion(self.spec, exp.knots, float(self.x.min()), float(self.x.max()))
        pts = np.linspace(self.x.min(), self.x.max(), 37)
        np.testing.assert_allclose(
            evaluate_basis_matrix(exp, pts), evaluate_basis_matrix(clone, pts), atol=1e-14
        )

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            SplineSpec(covariate="z1", basis_dim=3)  # below the cubic minimum
        with pytest.raises(ValidationError):
            SplineSpec(covariate="z1", basis_dim=10, degree=0)
        with pytest.raises(ValidationError):
            SplineSpec(covariate="z1", basis_dim=10, penalty_order=3)
