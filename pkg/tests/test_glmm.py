import math

import mpmath
import numpy as np
import pytest

from mcmle import glmm, oracle
from mcmle.glmm import (
    GlmmDesign,
    GlmmParams,
    ModelSpecError,
    augmented_design,
    design_from_spec,
    design_to_spec,
    influenza_design,
    linear_predictor,
    log_ratio,
    log_ratio_grad,
    log_ratio_hess,
    mcculloch_design,
    simulate_y,
    softplus,
)


def naive_bernoulli_loglik(eta, y):
    """Extended-precision log prod p^y (1-p)^(1-y); usable for |eta| <= 20."""
    with mpmath.workdps(50):
        total = mpmath.mpf(0)
        for e, yy in zip(eta, y):
            p = 1 / (1 + mpmath.exp(-mpmath.mpf(e)))
            total += mpmath.log(p if yy else 1 - p)
        return float(total)


class TestDesign:
    def test_mcculloch_shape(self):
        d = mcculloch_design(15)
        assert d.T == 15 and d.p == 1 and d.q == 1 and d.r == 1
        assert d.X[0, 0] == pytest.approx(1 / 15)
        assert d.X[-1, 0] == 1.0
        assert (d.Z == 1.0).all()

    def test_influenza_shape(self):
        d = influenza_design()
        assert (d.T, d.p, d.q, d.r) == (4, 4, 6, 3)
        assert d.theta_dim == 7
        assert d.Z[3, 1] == -1.0
        assert list(d.delta_map) == [0, 1, 2, 2, 2, 2]

    def test_delta_map_must_cover(self):
        with pytest.raises(ModelSpecError):
            GlmmDesign(X=np.eye(2), Z=np.eye(2), delta_map=np.array([0, 2]))

    def test_dimension_mismatch(self):
        with pytest.raises(ModelSpecError):
            GlmmDesign(X=np.eye(2), Z=np.ones((3, 1)), delta_map=np.array([0]))


class TestLinearPredictor:
    def test_zero_params(self):
        d = mcculloch_design(4)
        params = GlmmParams([0.0], [0.0])
        eta = linear_predictor(d, params, np.array([2.7]))
        assert (eta == 0.0).all()

    def test_influenza_hand_calculation(self):
        # beta = (1,2,3,4), delta = (1,1,1), b = ones: row 4 of Z is
        # (1,-1,0,0,0,1), so eta = (1+3, 2+3, 3+3, 4+1)
        d = influenza_design()
        params = GlmmParams([1.0, 2.0, 3.0, 4.0], [1.0, 1.0, 1.0])
        eta = linear_predictor(d, params, np.ones(6))
        assert np.allclose(eta, [4.0, 5.0, 6.0, 5.0], rtol=0, atol=0)

    def test_scalar_specialization(self):
        d = mcculloch_design(5)
        params = GlmmParams([2.0], [0.5])
        b = np.array([1.2])
        eta = linear_predictor(d, params, b)
        assert np.allclose(eta, 2.0 * d.X[:, 0] + 0.5 * 1.2)

    def test_dimension_check(self):
        d = mcculloch_design(5)
        with pytest.raises(ValueError):
            linear_predictor(d, GlmmParams([1.0], [1.0]), np.ones(2))


class TestLogRatio:
    def test_null_params_constant(self):
        d = mcculloch_design(7)
        params = GlmmParams([0.0], [0.0])
        for y in (np.zeros(7), np.ones(7), np.array([1, 0, 1, 0, 1, 0, 1])):
            assert log_ratio(d, params, np.array([0.3]), y) == -7 * math.log(2.0)

    def test_saturation(self):
        # T=1, y=1, eta=40: probability within 1e-17 of one
        d = GlmmDesign(X=np.ones((1, 1)), Z=np.ones((1, 1)), delta_map=np.array([0]))
        params = GlmmParams([40.0], [0.0])
        val = log_ratio(d, params, np.array([0.0]), np.array([1]))
        assert val > -1e-17
        assert val <= 0.0

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_naive_formula(self, seed):
        d = mcculloch_design(6)
        rng = np.random.default_rng(seed)
        params = GlmmParams(rng.normal(scale=3, size=1), rng.normal(scale=2, size=1))
        b = rng.normal(size=1)
        y = rng.integers(0, 2, size=6)
        eta = linear_predictor(d, params, b)
        assert np.abs(eta).max() <= 20
        want = naive_bernoulli_loglik(eta, y)
        assert log_ratio(d, params, b, y) == pytest.approx(want, abs=1e-12)

    def test_always_nonpositive(self):
        d = influenza_design()
        rng = np.random.default_rng(5)
        for _ in range(50):
            params = GlmmParams(rng.normal(scale=4, size=4), rng.normal(scale=3, size=3))
            val = log_ratio(d, params, rng.normal(size=6), rng.integers(0, 2, size=4))
            assert val <= 0.0

    def test_rejects_non_binary(self):
        d = mcculloch_design(3)
        with pytest.raises(ValueError):
            log_ratio(d, GlmmParams([1.0], [1.0]), np.zeros(1), np.array([0, 2, 1]))


class TestRatioDerivatives:
    @pytest.mark.parametrize("design_fn", [lambda: mcculloch_design(5), influenza_design])
    def test_gradient_finite_differences(self, design_fn):
        d = design_fn()
        rng = np.random.default_rng(17)
        theta = rng.normal(size=d.theta_dim)
        b = rng.normal(size=d.q)
        y = rng.integers(0, 2, size=d.T)
        params = GlmmParams.from_theta(d, theta)
        grad = log_ratio_grad(d, params, b, y)
        fd = np.empty(d.theta_dim)
        for k in range(d.theta_dim):
            e = np.zeros(d.theta_dim)
            e[k] = 1e-6
            up = log_ratio(d, GlmmParams.from_theta(d, theta + e), b, y)
            dn = log_ratio(d, GlmmParams.from_theta(d, theta - e), b, y)
            fd[k] = (up - dn) / 2e-6
        assert np.abs(fd - grad).max() / max(1.0, np.abs(grad).max()) < 1e-6

    def test_hessian_negative_semidefinite(self):
        d = influenza_design()
        rng = np.random.default_rng(23)
        for _ in range(20):
            params = GlmmParams(rng.normal(scale=3, size=4), rng.normal(scale=2, size=3))
            H = log_ratio_hess(d, params, rng.normal(size=6), rng.integers(0, 2, size=4))
            assert np.linalg.eigvalsh(H).max() <= 1e-10

    def test_null_gradient_beta_block(self):
        d = mcculloch_design(5)
        params = GlmmParams([0.0], [0.0])
        y = np.ones(5)
        grad = log_ratio_grad(d, params, np.array([0.7]), y)
        assert grad[0] == pytest.approx(0.5 * d.X[:, 0].sum(), abs=1e-14)

    def test_augmented_design_identity(self):
        # eta = M(b) theta exactly, for any parameter point
        d = influenza_design()
        rng = np.random.default_rng(31)
        theta = rng.normal(size=7)
        b = rng.normal(size=6)
        M = augmented_design(d, b)
        params = GlmmParams.from_theta(d, theta)
        assert np.allclose(M @ theta, linear_predictor(d, params, b), rtol=1e-14)


class TestSimulate:
    def test_fair_coin(self):
        d = GlmmDesign(X=np.ones((1, 1)), Z=np.ones((1, 1)), delta_map=np.array([0]))
        data = simulate_y(d, GlmmParams([0.0], [0.0]), 10**4, seed=6)
        freq = data.records.mean()
        assert abs(freq - 0.5) < 0.015

    def test_deterministic(self, desk_design, desk_truth):
        a = simulate_y(desk_design, desk_truth, 50, seed=12)
        b = simulate_y(desk_design, desk_truth, 50, seed=12)
        assert (a.records == b.records).all()

    def test_marginal_frequencies_match_oracle(self):
        # per-position success frequencies against quadrature marginals
        design = mcculloch_design(15)
        truth = GlmmParams([5.0], [math.sqrt(0.5)])
        n = 10**4
        data = simulate_y(design, truth, n, seed=13)
        rule = oracle.gauss_hermite(64)
        from scipy.special import expit

        eta = 5.0 * design.X[:, 0][None, :] + math.sqrt(0.5) * rule.nodes[:, None]
        probs = rule.weights @ expit(eta)
        freq = data.records.mean(axis=0)
        band = 3 * np.sqrt(probs * (1 - probs) / n)
        assert (np.abs(freq - probs) <= band).all()


class TestSignSymmetry:
    def test_exact_likelihood_even_in_delta(self, desk_design, desk_truth):
        rule = oracle.gauss_hermite(64)
        data = simulate_y(desk_design, desk_truth, 25, seed=14)
        plus = oracle.gh_loglik(desk_design, GlmmParams([4.0], [1.3]), data, rule)
        minus = oracle.gh_loglik(desk_design, GlmmParams([4.0], [-1.3]), data, rule)
        assert plus == pytest.approx(minus, abs=1e-10)

    def test_canonical_folds_sign(self):
        params = GlmmParams([1.0], [-2.0]).canonical()
        assert params.delta[0] == 2.0


class TestSpecFiles:
    def test_round_trip(self):
        d = influenza_design()
        again = design_from_spec(design_to_spec(d))
        assert (again.X == d.X).all()
        assert (again.Z == d.Z).all()
        assert (again.delta_map == d.delta_map).all()
        assert again.name == d.name

    def test_missing_field_named(self):
        with pytest.raises(ModelSpecError, match="delta_map"):
            design_from_spec({"X": [[1.0]], "Z": [[1.0]]})

    def test_bad_matrix_named(self):
        with pytest.raises(ModelSpecError, match="'X'"):
            design_from_spec({"X": [[1.0], [1.0, 2.0]], "Z": [[1.0]], "delta_map": [1]})

    def test_one_based_conversion(self):
        spec = {"X": [[1.0]], "Z": [[1.0]], "delta_map": [1]}
        d = design_from_spec(spec)
        assert d.delta_map[0] == 0
        assert design_to_spec(d)["delta_map"] == [1]


def test_softplus_overflow_free():
    assert softplus(1000.0) == 1000.0
    assert softplus(-1000.0) == 0.0
    assert softplus(0.0) == math.log(2.0)
    x = np.linspace(-30, 30, 101)
    assert np.allclose(softplus(x), np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0))
