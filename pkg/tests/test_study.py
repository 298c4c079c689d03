import numpy as np
import pytest

from mcmle import engine, glmm, infer, oracle, study
from mcmle.glmm import GlmmDesign, GlmmParams
from mcmle.study import (
    convergence_experiment,
    coverage_study,
    generate_dataset,
    scheme_variance_compare,
)


class TestGenerateDataset:
    def test_deterministic(self, desk_design, desk_truth):
        a = generate_dataset(desk_design, desk_truth, 30, seed=1)
        b = generate_dataset(desk_design, desk_truth, 30, seed=1)
        assert (a.records == b.records).all()

    def test_matches_simulate_y(self, desk_design, desk_truth):
        a = generate_dataset(desk_design, desk_truth, 10, seed=2)
        b = glmm.simulate_y(desk_design, desk_truth, 10, seed=2)
        assert (a.records == b.records).all()


class TestCoverage:
    def test_single_replicate_structural(self, desk_design, desk_truth):
        res = coverage_study(
            desk_design, desk_truth, n=2000, m=500, replicates=1, level=0.999, seed=3
        )
        assert res.covered in (0, 1)
        assert res.replicates == 1
        assert res.estimates.shape == (1, 2)
        # replay the membership decision through the public ellipse API
        rule = oracle.gauss_hermite(64)
        J, _, W = oracle.exact_JVW(desk_design, desk_truth, rule)
        vcov = infer.sandwich_vcov(J, J, W, n=2000, m=500)
        ell = infer.confidence_ellipse(vcov, res.estimates[0], 0.999)
        assert infer.ellipse_contains(ell, desk_truth.to_theta()) == bool(res.covered)

    def test_high_info_replicate_covers(self, desk_design, desk_truth):
        res = coverage_study(
            desk_design, desk_truth, n=2000, m=500, replicates=2, level=0.999, seed=4
        )
        assert res.covered == 2

    def test_determinism(self, desk_design, desk_truth):
        a = coverage_study(desk_design, desk_truth, n=100, m=50, replicates=4, level=0.9, seed=5)
        b = coverage_study(desk_design, desk_truth, n=100, m=50, replicates=4, level=0.9, seed=5)
        assert a.covered == b.covered
        assert (a.estimates == b.estimates).all()
        assert (a.covered_flags == b.covered_flags).all()

    def test_thread_pool_merges_identically(self, desk_design, desk_truth):
        seq = coverage_study(desk_design, desk_truth, n=80, m=40, replicates=6, level=0.9, seed=6)
        par = coverage_study(
            desk_design, desk_truth, n=80, m=40, replicates=6, level=0.9, seed=6, threads=2
        )
        assert seq.covered == par.covered
        assert (seq.estimates == par.estimates).all()

    def test_plugin_mode_runs(self, desk_design, desk_truth):
        res = coverage_study(
            desk_design, desk_truth, n=400, m=300, replicates=3, level=0.95, seed=7,
            ellipse_mode="plugin",
        )
        assert res.ellipse_used == "plugin"
        assert 0 <= res.covered <= 3

    def test_unknown_mode_rejected(self, desk_design, desk_truth):
        with pytest.raises(ValueError):
            coverage_study(desk_design, desk_truth, n=10, m=10, replicates=1, level=0.9,
                           seed=8, ellipse_mode="bogus")

    def test_estimate_cloud_centers_on_truth(self, desk_design, desk_truth):
        res = coverage_study(
            desk_design, desk_truth, n=500, m=100, replicates=40, level=0.95, seed=9
        )
        est = res.estimates[res.covered_flags >= 0]
        cloud_se = est.std(axis=0, ddof=1) / np.sqrt(len(est))
        assert (np.abs(est.mean(axis=0) - desk_truth.to_theta()) <= 4 * cloud_se).all()


class TestConvergence:
    def test_rate_and_monotonicity(self, desk_design, desk_truth):
        y = glmm.simulate_y(desk_design, desk_truth, 1, seed=10).records[0]
        res = convergence_experiment(
            desk_design, desk_truth, y, m_grid=[100, 1000, 10000], seeds_per_m=40, seed=11
        )
        assert -0.65 <= res.slope <= -0.35
        assert (np.diff(res.rmse) <= res.rmse[:-1]).all()  # non-increasing up to noise

    def test_constant_ratio_rmse_floor(self, desk_design):
        # the estimate is exact for every sample; the only residual is the
        # quadrature weight normalization (~1e-16)
        null = GlmmParams(np.zeros(1), np.zeros(1))
        y = np.array([1, 0, 1, 1, 0], dtype=np.int8)
        res = convergence_experiment(
            desk_design, null, y, m_grid=[10, 100], seeds_per_m=5, seed=12
        )
        assert (res.rmse <= 1e-13).all()


class TestSchemeVariance:
    def test_jensen_ordering(self, desk_design, desk_truth):
        data = glmm.simulate_y(desk_design, desk_truth, 10, seed=13)
        res = scheme_variance_compare(
            desk_design, desk_truth, data, m=400, replicates=150, seed=14
        )
        assert res.trace_fresh >= res.trace_shared - 2 * res.diff_se

    def test_single_record_schemes_coincide(self, desk_design, desk_truth):
        data = glmm.simulate_y(desk_design, desk_truth, 1, seed=15)
        res = scheme_variance_compare(
            desk_design, desk_truth, data, m=200, replicates=120, seed=16
        )
        assert res.trace_fresh == res.trace_shared  # same draws, bitwise

    def test_constant_ratio_balanced_records(self):
        # beta = delta = 0 with exactly balanced records: the score does not
        # depend on the sample at all, so both schemes have zero variance
        design = glmm.mcculloch_design(4)
        null = GlmmParams([0.0], [0.0])
        records = np.tile(np.array([1, 0, 1, 0], dtype=np.int8), (6, 1))
        data = engine.ObservedData(records=records)
        res = scheme_variance_compare(design, null, data, m=120, replicates=100, seed=17)
        # every replicate yields the same score bit pattern; np.var still
        # leaves ~1e-30 because the replicate mean itself rounds
        assert res.trace_shared <= 1e-28
        assert res.trace_fresh <= 1e-28

    def test_budget_must_divide(self, desk_design, desk_truth):
        data = glmm.simulate_y(desk_design, desk_truth, 3, seed=18)
        with pytest.raises(ValueError):
            scheme_variance_compare(desk_design, desk_truth, data, m=100, replicates=100, seed=19)

    def test_needs_replicates(self, desk_design, desk_truth):
        data = glmm.simulate_y(desk_design, desk_truth, 2, seed=20)
        with pytest.raises(ValueError):
            scheme_variance_compare(desk_design, desk_truth, data, m=10, replicates=50, seed=21)
